#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace aahr {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

template <typename Scalar>
using ColVec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatF = Mat<float>;
using MatD = Mat<double>;

/// Base of every error raised by the library. The CLI maps each subclass to
/// its own exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are inconsistent.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite input or a degenerate numeric case.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A file could not be opened, read or written.
class FileError : public Error {
 public:
  FileError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

/// A file parsed but its content is malformed (bad magic, truncated payload,
/// dims that disagree with the manifest).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Manifest-level problem: unknown pair id, missing referenced file.
class DatasetError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or synthetic spec.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Ring buffer overflow in a single push.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Live and shadow parameter sets disagree in structure.
class CongruenceError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// Evaluation protocol violated (e.g. empty ground truth).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

template <typename Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite entries");
}

}  // namespace aahr
