#pragma once

#include <Eigen/Core>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "epact/errors.hpp"

namespace epact::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Named parameter tensors. Gradients and optimizer moments use the same
/// type with the same layout, so layers address everything by index.
template <typename S>
class ParamSet {
 public:
  std::size_t add(std::string name, Mat<S> value) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  Mat<S>& operator[](std::size_t i) { return values_[i]; }
  const Mat<S>& operator[](std::size_t i) const { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    return std::nullopt;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += std::size_t(v.size());
    return n;
  }

  ParamSet zeros_like() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Mat<S>::Zero(values_[i].rows(), values_[i].cols()));
    return out;
  }

  void set_zero() {
    for (auto& v : values_) v.setZero();
  }

  template <typename T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<T>());
    return out;
  }

  /// this += alpha * other (same layout)
  void axpy(S alpha, const ParamSet& other) {
    for (std::size_t i = 0; i < size(); ++i) values_[i].noalias() += alpha * other.values_[i];
  }

  void scale(S alpha) {
    for (auto& v : values_) v *= alpha;
  }

  S squared_norm() const {
    S n = 0;
    for (const auto& v : values_) n += v.squaredNorm();
    return n;
  }

  bool all_finite() const {
    for (const auto& v : values_)
      if (!v.allFinite()) return false;
    return true;
  }

  /// Element (flat index within tensor i, column-major).
  S& element(std::size_t i, Eigen::Index flat) { return values_[i].data()[flat]; }
  S element(std::size_t i, Eigen::Index flat) const { return values_[i].data()[flat]; }

  bool same_layout(const ParamSet& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i)
      if (names_[i] != other.names_[i] || values_[i].rows() != other.values_[i].rows() ||
          values_[i].cols() != other.values_[i].cols())
        return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Mat<S>> values_;
};

/// Adds freshly initialized double-precision parameters under a name prefix.
class ParamBuilder {
 public:
  ParamBuilder(ParamSet<double>& params, std::mt19937_64& rng) : params_(params), rng_(rng) {}

  std::size_t uniform(const std::string& name, Eigen::Index rows, Eigen::Index cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Mat<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return params_.add(prefix_ + name, std::move(m));
  }

  std::size_t normal(const std::string& name, Eigen::Index rows, Eigen::Index cols, double sigma) {
    std::normal_distribution<double> dist(0.0, sigma);
    Mat<double> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
    return params_.add(prefix_ + name, std::move(m));
  }

  std::size_t constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value) {
    return params_.add(prefix_ + name, Mat<double>::Constant(rows, cols, value));
  }

  /// Scoped name prefix; restores the previous prefix on destruction.
  class Scope {
   public:
    Scope(ParamBuilder& b, const std::string& part) : b_(b), saved_(b.prefix_) { b_.prefix_ += part + "."; }
    ~Scope() { b_.prefix_ = saved_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    ParamBuilder& b_;
    std::string saved_;
  };

 private:
  ParamSet<double>& params_;
  std::mt19937_64& rng_;
  std::string prefix_;
};

}  // namespace epact::nn
