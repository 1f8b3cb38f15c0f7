#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

#include "dii/error.hpp"

namespace dii {

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over a fixed list of parameter matrices.
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  void step(std::span<Eigen::MatrixXd* const> params,
            std::span<const Eigen::MatrixXd> grads) {
    if (params.size() != grads.size()) {
      fail(ErrorCode::kShapeMismatch, "Adam: parameter/gradient count differ");
    }
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
        v_.push_back(Eigen::MatrixXd::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, t_);
    const double c2 = 1.0 - std::pow(opts_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& g = grads[i];
      m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
      v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
      const Eigen::ArrayXXd mhat = m_[i].array() / c1;
      const Eigen::ArrayXXd vhat = v_[i].array() / c2;
      params[i]->array() -= opts_.lr * mhat / (vhat.sqrt() + opts_.eps);
    }
  }

  int steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  std::vector<Eigen::MatrixXd> m_, v_;
  int t_ = 0;
};

}  // namespace dii
