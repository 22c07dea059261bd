#pragma once

#include <stdexcept>
#include <string>

namespace shaperefine {

// Malformed container header or JSON document.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Payload length disagrees with the header.
class SizeMismatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Grids or channel counts that must agree do not.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RankDeficiencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IncompleteLandmarksError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PairingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TransformError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UndefinedDistanceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace shaperefine
