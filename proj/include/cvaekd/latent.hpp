// Diagonal-Gaussian latent machinery: MLP heads emitting (mu, log variance),
// reparameterized sampling, closed-form KL, and precision-weighted fusion of
// the input-side prior with the background-knowledge distribution.
#pragma once

#include "cvaekd/layers.hpp"
#include "cvaekd/tensor.hpp"

namespace cvaekd {

inline constexpr double kLogVarMin = -8.0;
inline constexpr double kLogVarMax = 8.0;

struct GaussianParams {
  Tensor mu;       // 1 x d_z
  Tensor log_var;  // 1 x d_z, clamped to [kLogVarMin, kLogVarMax]

  std::size_t dim() const { return mu.cols(); }
};

inline GaussianParams standard_normal(std::size_t d) {
  return {Tensor(1, d), Tensor(1, d)};
}

inline GaussianParams gaussian_params_from(std::vector<double> mu,
                                           std::vector<double> log_var) {
  const std::size_t d = mu.size();
  return {Tensor::from(std::move(mu), 1, d),
          Tensor::from(std::move(log_var), 1, d)};
}

// The sigma head emits log variance, clamped for stability; sigma itself is
// exp(log_var / 2).
inline GaussianParams gaussian_head(const Tensor& h, const MlpParams& mu_mlp,
                                    const MlpParams& sigma_mlp) {
  GaussianParams g;
  g.mu = mlp2(h, mu_mlp);
  g.log_var = clamp(mlp2(h, sigma_mlp), kLogVarMin, kLogVarMax);
  if (g.mu.cols() != g.log_var.cols())
    throw ShapeError("gaussian_head: head output widths differ");
  return g;
}

// z = mu + exp(log_var/2) * eps, differentiable in mu and log_var. eps is
// drawn by the caller (standard normal in training, zeros for deterministic
// decoding), which keeps noise injectable for gradient checks.
inline Tensor reparameterize(const GaussianParams& g, const Tensor& eps) {
  if (eps.cols() != g.dim() || eps.rows() != 1)
    throw ShapeError("reparameterize: eps shape mismatch");
  return add(g.mu, mul(exp(mul_scalar(g.log_var, 0.5)), eps));
}

// KL(q || p) for diagonal Gaussians, summed over dimensions:
// 0.5 * sum( lvp - lvq + exp(lvq - lvp) + (muq - mup)^2 exp(-lvp) - 1 ).
// Exactly zero when q == p; each addend is x + e^-x - 1 + quadratic >= 0.
inline Tensor kl_divergence(const GaussianParams& q, const GaussianParams& p) {
  if (q.dim() != p.dim()) throw ShapeError("kl_divergence: dim mismatch");
  Tensor dlv = sub(p.log_var, q.log_var);
  Tensor ratio = exp(neg(dlv));  // sigma_q^2 / sigma_p^2
  Tensor dmu = sub(q.mu, p.mu);
  Tensor quad = mul(mul(dmu, dmu), exp(neg(p.log_var)));
  Tensor per_dim = add_scalar(add(add(dlv, ratio), quad), -1.0);
  return mul_scalar(sum_all(per_dim), 0.5);
}

// Product of experts: precisions add, means combine precision-weighted.
// Symmetric in its arguments; the result is at least as concentrated as
// either input in every dimension.
inline GaussianParams product_of_experts(const GaussianParams& a,
                                         const GaussianParams& b) {
  if (a.dim() != b.dim()) throw ShapeError("product_of_experts: dim mismatch");
  Tensor prec_a = exp(neg(a.log_var));
  Tensor prec_b = exp(neg(b.log_var));
  Tensor prec = add(prec_a, prec_b);
  GaussianParams out;
  out.log_var = clamp(neg(log(prec)), kLogVarMin, kLogVarMax);
  out.mu = div(add(mul(a.mu, prec_a), mul(b.mu, prec_b)), prec);
  return out;
}

}  // namespace cvaekd
