#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "phasemap/model.hpp"
#include "phasemap/rng.hpp"
#include "phasemap/tensor.hpp"

namespace phasemap {

/// iPEPS on a two-tensor checkerboard cell. Site tensors carry indices
/// (physical, up, left, down, right); every neighbor of A is B. The four
/// bond weight vectors live on the bonds A-right, A-down, A-left, A-up
/// (= Bond enum order) and are kept sorted descending with sum(l^2) = 1.
struct IPepsState {
  Tensor a, b;  ///< shape (d, D, D, D, D)
  std::array<std::vector<double>, 4> lambda;
  int phys_dim = 4;
  int bond_dim = 1;
};

struct SuConfig {
  int target_d = 4;
  int anneal_d = 0;  ///< 0 = 2 * target_d
  int anneal_sweeps = 10;
  std::vector<double> tau_schedule{0.1, 0.05, 0.01, 0.005, 0.001};
  int sweeps_per_tau = 2000;
  /// floor on sweeps per stage: the lambda-change metric cannot see purely
  /// physical-space relaxation (e.g. at decoupled couplings the gates leave
  /// every bond spectrum fixed), so each stage runs at least this long
  int min_sweeps_per_tau = 100;
  double convergence_tol = 1e-9;  ///< max change of any lambda entry per sweep
  int max_restarts = 3;
  std::uint64_t seed = 0;
};

inline int resolved_anneal_d(const SuConfig& cfg) {
  return cfg.anneal_d > 0 ? cfg.anneal_d : 2 * cfg.target_d;
}

struct SimulationResult {
  IPepsState state;
  bool converged = false;
  long sweeps_used = 0;
  double final_lambda_delta = 0.0;
  ModelParams params;
  std::uint64_t seed = 0;
  /// filled by post-selection: (seed, energy, su converged, ctm converged)
  struct Candidate {
    std::uint64_t seed;
    double energy;
    bool converged;
    bool ctm_converged;
  };
  std::vector<Candidate> candidates;
};

inline IPepsState random_state(int d, int bond_dim, std::uint64_t seed) {
  if (d < 1 || bond_dim < 1) throw ArgumentError("dimensions must be >= 1");
  Rng rng(seed);
  const auto dd = static_cast<std::size_t>(d);
  const auto db = static_cast<std::size_t>(bond_dim);
  IPepsState state;
  state.phys_dim = d;
  state.bond_dim = bond_dim;
  state.a = Tensor::random_uniform({dd, db, db, db, db}, rng);
  state.b = Tensor::random_uniform({dd, db, db, db, db}, rng);
  const double flat = 1.0 / std::sqrt(static_cast<double>(bond_dim));
  for (auto& l : state.lambda) l.assign(db, flat);
  return state;
}

namespace detail {

/// Per-orientation wiring of a bond step: which axis of A/B carries the bond
/// and which lambda sits on each remaining auxiliary axis.
struct BondWiring {
  std::size_t a_bond_axis, b_bond_axis;
  std::array<std::pair<std::size_t, std::size_t>, 3> a_env;  // (axis, lambda index)
  std::array<std::pair<std::size_t, std::size_t>, 3> b_env;
};

inline const BondWiring& bond_wiring(Bond bond) {
  // site axes: p=0, u=1, l=2, d=3, r=4
  static const std::array<BondWiring, 4> table{{
      // a_right: A.r -- lambda0 -- B.l
      {4, 2, {{{1, 3}, {2, 2}, {3, 1}}}, {{{1, 1}, {3, 3}, {4, 2}}}},
      // a_down: A.d -- lambda1 -- B.u
      {3, 1, {{{1, 3}, {2, 2}, {4, 0}}}, {{{2, 0}, {3, 3}, {4, 2}}}},
      // a_left: A.l -- lambda2 -- B.r
      {2, 4, {{{1, 3}, {3, 1}, {4, 0}}}, {{{1, 1}, {2, 0}, {3, 3}}}},
      // a_up: A.u -- lambda3 -- B.d
      {1, 3, {{{2, 2}, {3, 1}, {4, 0}}}, {{{1, 1}, {2, 0}, {4, 2}}}},
  }};
  return table[static_cast<std::size_t>(bond)];
}

inline void scale_axis(Tensor& t, std::size_t axis, const std::vector<double>& factors) {
  if (t.extent(axis) != factors.size()) throw DimensionError("axis/vector length mismatch");
  const auto strides = t.strides();
  const std::size_t stride = strides[axis];
  const std::size_t extent = t.extent(axis);
  const std::size_t block = stride * extent;
  double* data = t.data().data();
  const std::size_t total = t.size();
  for (std::size_t base = 0; base < total; base += block)
    for (std::size_t i = 0; i < extent; ++i) {
      double* p = data + base + i * stride;
      const double f = factors[i];
      for (std::size_t k = 0; k < stride; ++k) p[k] *= f;
    }
}

/// Guarded reciprocal: entries below guard * max(lambda) divide to zero.
inline std::vector<double> guarded_inverse(const std::vector<double>& lambda,
                                           double guard = 1e-12) {
  double lmax = 0.0;
  for (double v : lambda) lmax = std::max(lmax, v);
  std::vector<double> inv(lambda.size(), 0.0);
  for (std::size_t i = 0; i < lambda.size(); ++i)
    if (lambda[i] > guard * lmax && lambda[i] > 0.0) inv[i] = 1.0 / lambda[i];
  return inv;
}

inline std::pair<Eigen::MatrixXd, Eigen::MatrixXd> qr_thin(const Eigen::MatrixXd& m) {
  const Eigen::Index k = std::min(m.rows(), m.cols());
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m.rows(), k);
  Eigen::MatrixXd r = qr.matrixQR().topRows(k).triangularView<Eigen::Upper>();
  return {std::move(q), std::move(r)};
}

inline Eigen::MatrixXd as_eigen(const Tensor& t, std::size_t rows, std::size_t cols) {
  return Eigen::Map<const MatrixRM>(t.data().data(), static_cast<Eigen::Index>(rows),
                                    static_cast<Eigen::Index>(cols));
}

}  // namespace detail

/// One simple-update bond step: absorb the environment weights, reduce both
/// tensors by a QR split, apply the gate to the reduced two-site blob,
/// truncate by SVD back to the state's bond dimension and restore the
/// environment weights with a guarded pseudo-inverse.
inline IPepsState su_step(const IPepsState& state, const Tensor& gate, Bond bond) {
  const auto& wiring = detail::bond_wiring(bond);
  const std::size_t d = static_cast<std::size_t>(state.phys_dim);
  const std::size_t D = static_cast<std::size_t>(state.bond_dim);
  if (gate.rank() != 4 || gate.extent(2) != d || gate.extent(0) != d)
    throw DimensionError("gate extent does not match physical dimension");
  const std::vector<double>& lam_bond = state.lambda[static_cast<std::size_t>(bond)];

  Tensor a_env = state.a;
  Tensor b_env = state.b;
  for (const auto& [axis, li] : wiring.a_env) detail::scale_axis(a_env, axis, state.lambda[li]);
  for (const auto& [axis, li] : wiring.b_env) detail::scale_axis(b_env, axis, state.lambda[li]);

  // permute to (env axes ascending, p, bond) and QR-reduce
  auto make_order = [](std::size_t bond_axis) {
    std::vector<std::size_t> env;
    for (std::size_t ax = 1; ax < 5; ++ax)
      if (ax != bond_axis) env.push_back(ax);
    std::vector<std::size_t> order = env;
    order.push_back(0);
    order.push_back(bond_axis);
    return order;
  };
  const auto a_order = make_order(wiring.a_bond_axis);
  const auto b_order = make_order(wiring.b_bond_axis);
  const Tensor a_perm = permute(a_env, a_order);
  const Tensor b_perm = permute(b_env, b_order);

  const std::size_t env_size = D * D * D;
  auto [qa, ra] = detail::qr_thin(detail::as_eigen(a_perm, env_size, d * D));
  auto [qb, rb] = detail::qr_thin(detail::as_eigen(b_perm, env_size, d * D));
  const std::size_t ka = static_cast<std::size_t>(ra.rows());
  const std::size_t kb = static_cast<std::size_t>(rb.rows());

  // theta(ka, pA, kb, pB) = sum_m ra(ka; pA, m) lam(m) rb(kb; pB, m)
  MatrixRM ra_rm = ra;
  MatrixRM rb_rm = rb;
  Tensor ra_t({ka, d, D}, std::vector<double>(ra_rm.data(), ra_rm.data() + ra_rm.size()));
  Tensor rb_t({kb, d, D}, std::vector<double>(rb_rm.data(), rb_rm.data() + rb_rm.size()));
  detail::scale_axis(ra_t, 2, lam_bond);
  {
    Tensor theta = contract(ra_t, rb_t, IndexPairs{{2, 2}});  // (ka, pA, kb, pB)
    Tensor theta_g = contract(theta, gate, IndexPairs{{1, 2}, {3, 3}});  // (ka, kb, pA', pB')

    Tensor blob = permute(theta_g, {0, 2, 1, 3});  // (ka, pA', kb, pB')

    SvdResult svd;
    try {
      svd = svd_truncated(blob, {0, 1}, D, 0.0);
    } catch (const DecompositionError&) {
      // retry once with jitter
      Tensor jittered = blob;
      Rng jrng(0xC0FFEE);
      const double eps = 1e-12 * std::max(1.0, blob.max_abs());
      for (double& x : jittered.data()) x += eps * jrng.uniform_pm1();
      try {
        svd = svd_truncated(jittered, {0, 1}, D, 0.0);
      } catch (const DecompositionError&) {
        throw StepError("simple-update SVD failed on bond " +
                        std::to_string(static_cast<int>(bond)));
      }
    }

    const std::size_t keep = svd.s.size();
    double nrm = 0.0;
    for (double v : svd.s) nrm += v * v;
    nrm = std::sqrt(nrm);
    std::vector<double> lam_new(D, 0.0);
    for (std::size_t i = 0; i < keep; ++i) lam_new[i] = nrm > 0.0 ? svd.s[i] / nrm : 0.0;

    // rebuild site tensors: Q . U, padded back to extent D on the bond
    auto rebuild = [&](const Eigen::MatrixXd& q, const Tensor& factor, bool factor_is_u,
                       std::size_t kq) {
      // factor_is_u: u has shape (kq, d?, keep)... u: (ka, pA', keep); v: (keep, kb, pB')
      Tensor f = factor_is_u ? factor : permute(factor, {1, 2, 0});  // (k, p, keep)
      const std::size_t kp = f.extent(2);
      Eigen::MatrixXd fm = detail::as_eigen(f, kq, d * kp);
      Eigen::MatrixXd core = q * fm;  // (env^3, d * keep)
      MatrixRM core_rm = core;
      Tensor t({env_size, d * kp},
               std::vector<double>(core_rm.data(), core_rm.data() + core_rm.size()));
      Tensor shaped = reshape(t, {D, D, D, d, kp});
      if (kp < D) {
        // zero-pad the bond axis; only the last axis changed extent
        Tensor padded({D, D, D, d, D});
        for (std::size_t i = 0; i < shaped.size(); ++i)
          padded.data()[(i / kp) * D + (i % kp)] = shaped.data()[i];
        shaped = std::move(padded);
      }
      return shaped;  // (e1, e2, e3, p, bond) with bond extent D
    };

    Tensor a_new5 = rebuild(qa, svd.u, true, ka);
    Tensor b_new5 = rebuild(qb, svd.v, false, kb);

    // divide the environment weights back out (guarded)
    auto restore = [&](Tensor t, const std::array<std::pair<std::size_t, std::size_t>, 3>& env,
                       const std::vector<std::size_t>& order) {
      // t axes: (e1, e2, e3, p, bond) where (e1,e2,e3) are the env axes in
      // ascending original position; invert the permutation to (p,u,l,d,r)
      std::array<std::size_t, 3> env_axes_sorted;
      std::size_t n = 0;
      for (std::size_t ax = 1; ax < 5; ++ax)
        if (ax != order.back()) env_axes_sorted[n++] = ax;
      for (const auto& [axis, li] : env) {
        // position of `axis` within the sorted env axes
        for (std::size_t k = 0; k < 3; ++k)
          if (env_axes_sorted[k] == axis)
            detail::scale_axis(t, k, detail::guarded_inverse(state.lambda[li]));
      }
      // inverse permute: order maps new position -> original axis
      std::vector<std::size_t> inv(5);
      for (std::size_t pos = 0; pos < 5; ++pos) inv[order[pos]] = pos;
      std::vector<std::size_t> back(5);
      for (std::size_t target = 0; target < 5; ++target) back[target] = inv[target];
      return permute(t, back);
    };

    IPepsState out = state;
    out.a = restore(std::move(a_new5), wiring.a_env, a_order);
    out.b = restore(std::move(b_new5), wiring.b_env, b_order);
    out.lambda[static_cast<std::size_t>(bond)] = std::move(lam_new);
    const double amax = out.a.max_abs();
    const double bmax = out.b.max_abs();
    if (amax > 0.0) out.a.scale_inplace(1.0 / amax);
    if (bmax > 0.0) out.b.scale_inplace(1.0 / bmax);
    return out;
  }
}

/// One full sweep: all four bond orientations in canonical order.
inline IPepsState su_sweep(IPepsState state, const GateSet& gates) {
  for (Bond bond : kBondOrder) state = su_step(state, gate_for(gates, bond), bond);
  return state;
}

inline double lambda_delta(const IPepsState& a, const IPepsState& b) {
  double delta = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t n = std::max(a.lambda[i].size(), b.lambda[i].size());
    for (std::size_t k = 0; k < n; ++k) {
      const double va = k < a.lambda[i].size() ? a.lambda[i][k] : 0.0;
      const double vb = k < b.lambda[i].size() ? b.lambda[i][k] : 0.0;
      delta = std::max(delta, std::abs(va - vb));
    }
  }
  return delta;
}

/// Keep only the dominant weight on every bond, then zero-pad the auxiliary
/// extents to `target_d`.
inline IPepsState project_to_product(const IPepsState& state, int target_d) {
  const std::size_t d = static_cast<std::size_t>(state.phys_dim);
  const std::size_t D = static_cast<std::size_t>(target_d);
  IPepsState out;
  out.phys_dim = state.phys_dim;
  out.bond_dim = target_d;
  auto slice_pad = [&](const Tensor& t) {
    Tensor res({d, D, D, D, D});
    const std::size_t Din = t.extent(1);
    for (std::size_t p = 0; p < d; ++p)
      res.data()[p * D * D * D * D] = t.data()[p * Din * Din * Din * Din];
    return res;
  };
  out.a = slice_pad(state.a);
  out.b = slice_pad(state.b);
  const double amax = out.a.max_abs();
  const double bmax = out.b.max_abs();
  if (amax > 0.0) out.a.scale_inplace(1.0 / amax);
  if (bmax > 0.0) out.b.scale_inplace(1.0 / bmax);
  for (auto& l : out.lambda) {
    l.assign(D, 0.0);
    l[0] = 1.0;
  }
  return out;
}

/// Annealed imaginary-time evolution from a warm-start state at the target
/// bond dimension (no anneal stage, no projection).
inline SimulationResult evolve_state(IPepsState state, const ModelParams& params,
                                     const SuConfig& cfg) {
  SimulationResult result;
  result.params = params;
  result.seed = cfg.seed;
  long total_sweeps = 0;
  bool last_stage_converged = false;
  double last_delta = 0.0;
  for (double tau : cfg.tau_schedule) {
    const GateSet gates = build_gates(params, tau);
    last_stage_converged = false;
    for (int sweep_i = 0; sweep_i < cfg.sweeps_per_tau; ++sweep_i) {
      IPepsState next = su_sweep(state, gates);
      last_delta = lambda_delta(next, state);
      state = std::move(next);
      ++total_sweeps;
      if (last_delta < cfg.convergence_tol && sweep_i + 1 >= cfg.min_sweeps_per_tau) {
        last_stage_converged = true;
        break;
      }
    }
  }
  result.state = std::move(state);
  result.converged = last_stage_converged;
  result.sweeps_used = total_sweeps;
  result.final_lambda_delta = last_delta;
  return result;
}

/// Full protocol: a few sweeps at a large bond dimension and the largest time
/// step, projection to a product state, then evolution at the target D down
/// the tau schedule. Unconverged runs are discarded and repeated from a fresh
/// seed up to max_restarts times.
inline SimulationResult evolve(const ModelParams& params, const SuConfig& cfg) {
  if (cfg.tau_schedule.empty()) throw ArgumentError("tau schedule must be nonempty");
  for (std::size_t i = 1; i < cfg.tau_schedule.size(); ++i)
    if (!(cfg.tau_schedule[i] < cfg.tau_schedule[i - 1]))
      throw ArgumentError("tau schedule must be strictly descending");

  SimulationResult result;
  for (int attempt = 0; attempt <= cfg.max_restarts; ++attempt) {
    const std::uint64_t seed =
        attempt == 0 ? cfg.seed : seed_hash({cfg.seed, 0x5EEDu, static_cast<std::uint64_t>(attempt)});
    IPepsState state = random_state(4, resolved_anneal_d(cfg), seed);
    const GateSet anneal_gates = build_gates(params, cfg.tau_schedule.front());
    for (int s = 0; s < cfg.anneal_sweeps; ++s) state = su_sweep(state, anneal_gates);
    state = project_to_product(state, cfg.target_d);

    SuConfig stage_cfg = cfg;
    stage_cfg.seed = seed;
    result = evolve_state(std::move(state), params, stage_cfg);
    result.sweeps_used += cfg.anneal_sweeps;
    result.seed = seed;
    if (result.converged) break;
  }
  return result;
}

/// Feature vector: the four bond weight vectors concatenated in canonical
/// bond order, each sorted descending and normalized to sum(l^2) = 1.
/// Length is exactly 4 * D.
inline std::vector<double> extract_features(const IPepsState& state) {
  std::vector<double> features;
  features.reserve(4 * static_cast<std::size_t>(state.bond_dim));
  for (const auto& lam : state.lambda) {
    std::vector<double> v = lam;
    std::sort(v.begin(), v.end(), std::greater<double>());
    double nrm = 0.0;
    for (double x : v) nrm += x * x;
    nrm = std::sqrt(nrm);
    for (double x : v) features.push_back(nrm > 0.0 ? x / nrm : 0.0);
  }
  return features;
}

}  // namespace phasemap
