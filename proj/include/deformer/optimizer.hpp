#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "deformer/transformer.hpp"

namespace deformer {

struct AdamConfig {
  double lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-9;
  double clip_norm = 0.0;  // 0 = off
};

// Adam with bias correction. Moment arrays are kept in parameter-list order.
template <typename S>
class AdamState {
 public:
  AdamConfig cfg;
  long long step_count = 0;

  void init(const ParamList<S>& params) {
    m_.clear();
    v_.clear();
    for (const auto& [name, tensor] : params) {
      m_.push_back(Mat<S>::Zero(tensor.rows(), tensor.cols()));
      v_.push_back(Mat<S>::Zero(tensor.rows(), tensor.cols()));
    }
  }

  bool initialized() const { return !m_.empty(); }

  std::vector<Mat<S>>& first_moments() { return m_; }
  std::vector<Mat<S>>& second_moments() { return v_; }

  void step(ParamList<S>& params) {
    if (m_.size() != params.size()) {
      throw ConfigError("adam: state holds " + std::to_string(m_.size()) + " moments for " +
                        std::to_string(params.size()) + " parameters");
    }
    for (auto& [name, tensor] : params) {
      if (!tensor.grad().allFinite()) {
        throw NumericalError("adam: non-finite gradient in parameter '" + name + "'");
      }
    }
    if (cfg.clip_norm > 0.0) {
      double squared_norm = 0.0;
      for (auto& [name, tensor] : params) {
        squared_norm += static_cast<double>(tensor.grad().squaredNorm());
      }
      const double norm = std::sqrt(squared_norm);
      if (norm > cfg.clip_norm) {
        const S factor = static_cast<S>(cfg.clip_norm / norm);
        for (auto& [name, tensor] : params) {
          tensor.data()->grad *= factor;
        }
      }
    }

    ++step_count;
    const S beta1 = static_cast<S>(cfg.beta1);
    const S beta2 = static_cast<S>(cfg.beta2);
    const S bias1 = S(1) - static_cast<S>(std::pow(cfg.beta1, static_cast<double>(step_count)));
    const S bias2 = S(1) - static_cast<S>(std::pow(cfg.beta2, static_cast<double>(step_count)));
    const S lr = static_cast<S>(cfg.lr);
    const S eps = static_cast<S>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Mat<S>& grad = params[i].second.grad();
      m_[i] = beta1 * m_[i] + (S(1) - beta1) * grad;
      v_[i] = beta2 * v_[i] + (S(1) - beta2) * grad.cwiseProduct(grad);
      params[i].second.mutable_value().array() -=
          lr * (m_[i].array() / bias1) / ((v_[i].array() / bias2).sqrt() + eps);
    }
  }

 private:
  std::vector<Mat<S>> m_;
  std::vector<Mat<S>> v_;
};

// Validation plateau handling: the learning rate drops once, by `factor`,
// after `patience` consecutive non-improving epochs; training stops after
// `stop_multiple` times the patience without improvement.
struct PlateauSchedule {
  int patience = 5;
  double factor = 0.1;
  int stop_multiple = 3;

  double best = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;
  bool reduced = false;

  // Feeds one epoch's validation loss; adjusts lr in place. Returns true
  // when training should stop.
  bool observe(double validation_loss, double& lr) {
    if (validation_loss < best) {
      best = validation_loss;
      epochs_since_best = 0;
      return false;
    }
    ++epochs_since_best;
    if (!reduced && epochs_since_best == patience) {
      lr *= factor;
      reduced = true;
    }
    return epochs_since_best >= stop_multiple * patience;
  }
};

}  // namespace deformer
