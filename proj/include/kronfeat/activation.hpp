#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <string>

namespace kf {

// Scalar link functions used as teacher/student nonlinearities.
// hermite12 is He1(z) + He2(z)/sqrt(2) = z + (z^2 - 1)/sqrt(2).
class Activation {
 public:
  enum class Kind { identity, relu, tanh_, square, hermite12 };

  Activation() : kind_(Kind::identity) {}
  explicit Activation(Kind k) : kind_(k) {}

  static Activation parse(const std::string& name) {
    if (name == "identity") return Activation(Kind::identity);
    if (name == "relu") return Activation(Kind::relu);
    if (name == "tanh") return Activation(Kind::tanh_);
    if (name == "square") return Activation(Kind::square);
    if (name == "hermite12") return Activation(Kind::hermite12);
    throw std::invalid_argument("unknown activation: " + name);
  }

  const char* name() const {
    switch (kind_) {
      case Kind::identity: return "identity";
      case Kind::relu: return "relu";
      case Kind::tanh_: return "tanh";
      case Kind::square: return "square";
      case Kind::hermite12: return "hermite12";
    }
    return "?";
  }

  bool is_identity() const { return kind_ == Kind::identity; }

  double f(double z) const {
    switch (kind_) {
      case Kind::identity: return z;
      case Kind::relu: return z > 0.0 ? z : 0.0;
      case Kind::tanh_: return std::tanh(z);
      case Kind::square: return z * z;
      case Kind::hermite12: return z + (z * z - 1.0) * kInvSqrt2;
    }
    return 0.0;
  }

  double df(double z) const {
    switch (kind_) {
      case Kind::identity: return 1.0;
      case Kind::relu: return z > 0.0 ? 1.0 : 0.0;
      case Kind::tanh_: {
        double t = std::tanh(z);
        return 1.0 - t * t;
      }
      case Kind::square: return 2.0 * z;
      case Kind::hermite12: return 1.0 + 2.0 * z * kInvSqrt2;
    }
    return 0.0;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& m) const {
    if (is_identity()) return m;
    return m.unaryExpr([this](double z) { return f(z); });
  }

  Eigen::MatrixXd apply_deriv(const Eigen::MatrixXd& m) const {
    if (is_identity()) return Eigen::MatrixXd::Ones(m.rows(), m.cols());
    return m.unaryExpr([this](double z) { return df(z); });
  }

 private:
  static constexpr double kInvSqrt2 = 0.7071067811865475244;
  Kind kind_;
};

}  // namespace kf
