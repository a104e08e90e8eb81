#pragma once

#include <stdexcept>
#include <string>

namespace m3snet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation. Messages name the offending
/// axes, e.g. "conv2d: input axis 1 (channels) = 6 not divisible by groups 4".
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values (model, degradation, trainer, CLI).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse, such as calling backward on a value that records no graph.
class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradients during training; the message carries the
/// step, learning rate and gradient norms.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace m3snet
