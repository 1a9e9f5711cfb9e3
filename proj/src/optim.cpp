#include "diffsat/optim.hpp"

#include <cmath>

#include "diffsat/errors.hpp"

namespace diffsat {

AdamW::AdamW(std::vector<std::string> names, std::vector<torch::Tensor> params, AdamWOptions opts)
    : names_(std::move(names)), params_(std::move(params)), opts_(opts) {
  DIFFSAT_EXPECT(names_.size() == params_.size(), "AdamW: one name per parameter");
  for (const auto& p : params_) {
    exp_avg_.push_back(torch::zeros_like(p));
    exp_avg_sq_.push_back(torch::zeros_like(p));
    steps_.push_back(torch::zeros({}, torch::kFloat32));
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) {
    auto& g = p.mutable_grad();
    if (g.defined()) g.zero_();
  }
}

void AdamW::step() {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> ps, gs, ms, vs, ss;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].grad();
    if (!g.defined()) continue;
    ps.push_back(params_[i]);
    gs.push_back(g);
    ms.push_back(exp_avg_[i]);
    vs.push_back(exp_avg_sq_[i]);
    ss.push_back(steps_[i]);
  }
  if (ps.empty()) return;
  // The fused kernel expects the step counters already advanced.
  for (auto& s : ss) s.add_(1);
  at::_fused_adamw_(ps, gs, ms, vs, {}, ss, opts_.lr, opts_.beta1, opts_.beta2, opts_.weight_decay,
                    opts_.eps, false, false);
}

double clip_grad_norm(const std::vector<torch::Tensor>& params, double max_norm) {
  torch::NoGradGuard ng;
  double total = 0.0;
  for (const auto& p : params)
    if (p.grad().defined()) total += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  const double norm = std::sqrt(total);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-6);
    for (const auto& p : params)
      if (p.grad().defined()) p.grad().mul_(scale);
  }
  return norm;
}

}  // namespace diffsat
