#pragma once

#include <stdexcept>
#include <string>

namespace ov3d {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AllBehindCamera : public Error {
 public:
  AllBehindCamera() : Error("every box corner has non-positive depth") {}
};

class PlacementFailure : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config key '" + key + "': " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

class EmptyRoi : public Error {
 public:
  EmptyRoi() : Error("region of interest contains no points") {}
};

class DegenerateNorm : public Error {
 public:
  DegenerateNorm() : Error("projected feature norm below 1e-12") {}
};

class NoPositives : public Error {
 public:
  NoPositives() : Error("contrastive batch has no positive pair") {}
};

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

class NonFiniteUpdate : public Error {
 public:
  using Error::Error;
};

class DivergenceDetected : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace ov3d
