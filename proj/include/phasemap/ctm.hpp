#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "phasemap/model.hpp"
#include "phasemap/simple_update.hpp"
#include "phasemap/tensor.hpp"

namespace phasemap {

struct CtmConfig {
  int chi = 0;  ///< environment dimension; 0 = 2 * D^2
  double tol = 1e-8;
  int max_iter = 200;
};

inline int resolved_chi(const CtmConfig& cfg, int bond_dim) {
  return cfg.chi > 0 ? cfg.chi : 2 * bond_dim * bond_dim;
}

/// Corner/edge environment of the checkerboard network, one full set per
/// sublattice position (0 = A sites, 1 = B sites). Leg conventions:
/// c1(d,r) c2(l,d) c3(u,l) c4(u,r); t1(l,d,r) t2(u,l,d) t3(l,u,r) t4(u,r,d);
/// site double tensors carry (u,l,d,r), each of extent D^2 fused (ket,bra).
struct CtmEnvironment {
  struct Site {
    Tensor c1, c2, c3, c4, t1, t2, t3, t4;
  };
  std::array<Site, 2> env;
  std::array<Tensor, 2> site;  ///< double-layer norm tensors
  int chi = 0;
  bool converged = false;
  int iterations = 0;
  /// normalized descending corner singular values, [sublattice*4 + corner]
  std::array<std::vector<double>, 8> corner_spectra;
};

namespace ctm_detail {

/// Double-layer tensor sum_{p,p'} bra(p',..') op(p',p) ket(p,..), fused legs
/// (u,l,d,r) of extent D^2 with the ket leg as the slower index of each pair.
inline Tensor double_layer(const Tensor& site, const Eigen::MatrixXd* op = nullptr) {
  const std::size_t d = site.extent(0);
  const std::size_t D1 = site.extent(1), D2 = site.extent(2), D3 = site.extent(3),
                    D4 = site.extent(4);
  Tensor ket = site;
  if (op != nullptr) {
    MatrixRM rm = *op;
    Tensor opt({d, d}, std::vector<double>(rm.data(), rm.data() + rm.size()));
    // ket'(p', u,l,d,r) = sum_p op(p', p) ket(p, ...)
    ket = contract(opt, site, IndexPairs{{1, 0}});
  }
  Tensor dbl = contract(ket, site, IndexPairs{{0, 0}});  // ket legs then bra legs
  dbl = permute(dbl, {0, 4, 1, 5, 2, 6, 3, 7});
  return reshape(dbl, {D1 * D1, D2 * D2, D3 * D3, D4 * D4},
                 {"u", "l", "d", "r"});
}

/// Trace vector for a fused (ket,bra) leg: flattened identity.
inline Tensor trace_vector(std::size_t fused_extent) {
  const auto D = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(fused_extent))));
  Tensor v({fused_extent});
  for (std::size_t i = 0; i < D; ++i) v.at(i * D + i) = 1.0;
  return v;
}

inline Tensor traced(const Tensor& dbl, const std::vector<std::string>& legs) {
  Tensor out = dbl;
  for (const auto& leg : legs) {
    Tensor tv = trace_vector(out.extent(out.label_position(leg))).with_labels({leg});
    out = contract(out, tv, LabelPairs{{leg, leg}});
  }
  return out;
}

inline void normalize(Tensor& t) {
  const double m = t.max_abs();
  if (m > 0.0) t.scale_inplace(1.0 / m);
}

/// Truncated SVD of a (possibly large) dense matrix. Uses exact BDCSVD for
/// small problems and a seeded randomized range finder with power iterations
/// for large ones; both paths are deterministic.
struct TruncSvd {
  Eigen::MatrixXd u;  // (rows x k)
  Eigen::VectorXd s;
  Eigen::MatrixXd v;  // (cols x k)
};

inline TruncSvd svd_top_k(const Eigen::MatrixXd& w, int k, std::uint64_t seed) {
  const Eigen::Index rows = w.rows(), cols = w.cols();
  const Eigen::Index kk = std::min<Eigen::Index>(k, std::min(rows, cols));
  TruncSvd out;
  if (std::min(rows, cols) <= std::max<Eigen::Index>(kk + 16, 192)) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
    out.u = svd.matrixU().leftCols(kk);
    out.s = svd.singularValues().head(kk);
    out.v = svd.matrixV().leftCols(kk);
    return out;
  }
  const Eigen::Index p = std::min<Eigen::Index>(cols, kk + 10);
  Rng rng(seed);
  Eigen::MatrixXd g(cols, p);
  for (Eigen::Index i = 0; i < cols; ++i)
    for (Eigen::Index j = 0; j < p; ++j) g(i, j) = rng.uniform_pm1();
  Eigen::MatrixXd y = w * g;
  for (int q = 0; q < 2; ++q) y = w * (w.transpose() * y);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
  Eigen::MatrixXd qy = qr.householderQ() * Eigen::MatrixXd::Identity(rows, p);
  Eigen::MatrixXd b = qy.transpose() * w;  // (p x cols)
  Eigen::BDCSVD<Eigen::MatrixXd> svd(b, Eigen::ComputeThinU | Eigen::ComputeThinV);
  out.u = qy * svd.matrixU().leftCols(kk);
  out.s = svd.singularValues().head(kk);
  out.v = svd.matrixV().leftCols(kk);
  return out;
}

/// Upper-left quarter around a site: C1 T1 / T4 a. Returned as a matrix with
/// rows = down-facing cut legs (chi, D^2) and cols = right-facing rest legs.
inline Eigen::MatrixXd quarter_ul(const CtmEnvironment::Site& e, const Tensor& a) {
  Tensor x = contract(e.c1.renamed("r", "tr"),
                      e.t4.renamed("d", "bd").renamed("r", "mr"), LabelPairs{{"d", "u"}});
  x = contract(x, e.t1.renamed("r", "tr2").renamed("d", "md"), LabelPairs{{"tr", "l"}});
  x = contract(x, a.renamed("d", "ad").renamed("r", "ar"),
               LabelPairs{{"mr", "l"}, {"md", "u"}});
  return to_matrix(x, {"bd", "ad"}, {"tr2", "ar"}).m;
}

/// Lower-left quarter: T4 a / C4 T3, rows = up-facing cut legs (chi, D^2),
/// cols = right-facing rest legs.
inline Eigen::MatrixXd quarter_ll(const CtmEnvironment::Site& e, const Tensor& a) {
  Tensor x = contract(e.c4.renamed("r", "br"),
                      e.t4.renamed("u", "tu").renamed("r", "mr"), LabelPairs{{"u", "d"}});
  x = contract(x, e.t3.renamed("r", "br2").renamed("u", "mu"), LabelPairs{{"br", "l"}});
  x = contract(x, a.renamed("u", "au").renamed("r", "ar"),
               LabelPairs{{"mr", "l"}, {"mu", "d"}});
  return to_matrix(x, {"tu", "au"}, {"br2", "ar"}).m;
}

struct ProjectorPair {
  Eigen::MatrixXd into_above;  // (bond x k), contracts the upper object's down leg
  Eigen::MatrixXd into_below;  // (bond x k), contracts the lower object's up leg
};

/// Half-system projectors for the cut between an upper quarter and a lower
/// quarter: W = Qup^T Qdn, truncated SVD W ~ U S V^T, A = Qdn V S^{-1/2},
/// B^T = Qup U S^{-1/2}. Inserting A B between the halves reproduces W
/// exactly at full rank and optimally in Frobenius norm when truncated.
inline ProjectorPair cut_projectors(const Eigen::MatrixXd& q_up, const Eigen::MatrixXd& q_dn,
                                    int chi, std::uint64_t seed) {
  Eigen::MatrixXd w = q_up.transpose() * q_dn;
  TruncSvd svd = svd_top_k(w, chi, seed);
  // numerical-rank guard on s^{-1/2}
  Eigen::Index k = 0;
  const double s0 = svd.s.size() > 0 ? svd.s[0] : 0.0;
  for (Eigen::Index i = 0; i < svd.s.size(); ++i)
    if (svd.s[i] > 1e-12 * s0 && svd.s[i] > 0.0) k = i + 1;
  k = std::max<Eigen::Index>(k, 1);
  Eigen::VectorXd inv_sqrt(k);
  for (Eigen::Index i = 0; i < k; ++i)
    inv_sqrt[i] = svd.s[i] > 0.0 ? 1.0 / std::sqrt(svd.s[i]) : 0.0;
  ProjectorPair pair;
  pair.into_above = q_dn * svd.v.leftCols(k) * inv_sqrt.asDiagonal();
  pair.into_below = q_up * svd.u.leftCols(k) * inv_sqrt.asDiagonal();
  return pair;
}

/// Contract a fused (chi, D^2) compound leg of `t` (labels leg_chi, leg_site)
/// with a (bond x k) projector, producing a new chi leg named `new_label`.
inline Tensor apply_projector(const Tensor& t, const std::string& leg_chi,
                              const std::string& leg_site, const Eigen::MatrixXd& proj,
                              const std::string& new_label) {
  Labels rest;
  for (const auto& l : t.labels())
    if (l != leg_chi && l != leg_site) rest.push_back(l);
  MatrixView view = to_matrix(t, rest, {leg_chi, leg_site});
  Eigen::MatrixXd m = view.m * proj;  // (rest x k)
  Shape col_shape{static_cast<std::size_t>(proj.cols())};
  return from_matrix(m, view.row_shape, view.row_labels, col_shape, {new_label});
}

/// One left absorption: the column whose row-0 site has sublattice parity p
/// is eaten by the left environment of both parities.
inline void left_move(CtmEnvironment& E, int p, int chi, std::uint64_t seed) {
  const int q = 1 - p;
  std::array<Eigen::MatrixXd, 2> q1, q4;
  for (int s = 0; s < 2; ++s) {
    q1[static_cast<std::size_t>(s)] = quarter_ul(E.env[static_cast<std::size_t>(s)], E.site[static_cast<std::size_t>(s)]);
    q4[static_cast<std::size_t>(s)] = quarter_ll(E.env[static_cast<std::size_t>(s)], E.site[static_cast<std::size_t>(s)]);
  }
  // cut 0 sits above row 0 (between a site of parity q and one of parity p),
  // cut 1 below row 0
  ProjectorPair cut0 = cut_projectors(q1[static_cast<std::size_t>(q)], q4[static_cast<std::size_t>(p)], chi, seed);
  ProjectorPair cut1 = cut_projectors(q1[static_cast<std::size_t>(p)], q4[static_cast<std::size_t>(q)], chi, seed + 1);

  auto c1t1 = [&](int s) {
    return contract(E.env[static_cast<std::size_t>(s)].c1.renamed("d", "cd"),
                    E.env[static_cast<std::size_t>(s)].t1.renamed("d", "s").renamed("r", "nr"),
                    LabelPairs{{"r", "l"}});
  };
  auto t4a = [&](int s) {
    return contract(E.env[static_cast<std::size_t>(s)].t4.renamed("u", "tu").renamed("d", "td"),
                    E.site[static_cast<std::size_t>(s)].renamed("u", "au").renamed("d", "ad"),
                    LabelPairs{{"r", "l"}});
  };
  auto c4t3 = [&](int s) {
    return contract(E.env[static_cast<std::size_t>(s)].c4.renamed("u", "cu"),
                    E.env[static_cast<std::size_t>(s)].t3.renamed("u", "s").renamed("r", "nr"),
                    LabelPairs{{"r", "l"}});
  };

  std::array<Tensor, 2> c1n, t4n, c4n;
  // new C1 serving parity q comes from the old parity-p tensors, and vice versa
  c1n[static_cast<std::size_t>(q)] =
      apply_projector(c1t1(p), "cd", "s", cut0.into_above, "d").renamed("nr", "r");
  c1n[static_cast<std::size_t>(p)] =
      apply_projector(c1t1(q), "cd", "s", cut1.into_above, "d").renamed("nr", "r");
  {
    Tensor mid = apply_projector(t4a(p), "tu", "au", cut0.into_below, "u");
    t4n[static_cast<std::size_t>(q)] = apply_projector(mid, "td", "ad", cut1.into_above, "d");
    Tensor mid2 = apply_projector(t4a(q), "tu", "au", cut1.into_below, "u");
    t4n[static_cast<std::size_t>(p)] = apply_projector(mid2, "td", "ad", cut0.into_above, "d");
  }
  c4n[static_cast<std::size_t>(q)] =
      apply_projector(c4t3(p), "cu", "s", cut1.into_below, "u").renamed("nr", "r");
  c4n[static_cast<std::size_t>(p)] =
      apply_projector(c4t3(q), "cu", "s", cut0.into_below, "u").renamed("nr", "r");

  for (int s = 0; s < 2; ++s) {
    normalize(c1n[static_cast<std::size_t>(s)]);
    normalize(t4n[static_cast<std::size_t>(s)]);
    normalize(c4n[static_cast<std::size_t>(s)]);
    E.env[static_cast<std::size_t>(s)].c1 = std::move(c1n[static_cast<std::size_t>(s)]);
    E.env[static_cast<std::size_t>(s)].t4 = std::move(t4n[static_cast<std::size_t>(s)]);
    E.env[static_cast<std::size_t>(s)].c4 = std::move(c4n[static_cast<std::size_t>(s)]);
  }
}

/// Rotate the whole network 90 degrees counterclockwise (north faces west
/// afterwards). Sublattice parity is preserved by the rotation.
inline CtmEnvironment rotate_ccw(const CtmEnvironment& E) {
  CtmEnvironment out;
  out.chi = E.chi;
  out.converged = E.converged;
  out.iterations = E.iterations;
  auto cycle = [](const Tensor& t, const std::vector<std::pair<std::string, std::string>>& map) {
    Tensor r = t;
    // two-phase rename so cycles do not collide
    for (const auto& [from, to] : map) r = r.renamed(from, "#" + to);
    for (const auto& [from, to] : map) r = r.renamed("#" + to, to);
    return r;
  };
  for (int s = 0; s < 2; ++s) {
    const auto& e = E.env[static_cast<std::size_t>(s)];
    auto& o = out.env[static_cast<std::size_t>(s)];
    out.site[static_cast<std::size_t>(s)] = cycle(E.site[static_cast<std::size_t>(s)],
                                                   {{"r", "u"}, {"u", "l"}, {"l", "d"}, {"d", "r"}});
    o.c1 = cycle(e.c2, {{"l", "d"}, {"d", "r"}});
    o.c2 = cycle(e.c3, {{"u", "l"}, {"l", "d"}});
    o.c3 = cycle(e.c4, {{"r", "u"}, {"u", "l"}});
    o.c4 = cycle(e.c1, {{"r", "u"}, {"d", "r"}});
    o.t1 = cycle(e.t2, {{"u", "l"}, {"l", "d"}, {"d", "r"}});
    o.t2 = cycle(e.t3, {{"r", "u"}, {"u", "l"}, {"l", "d"}});
    o.t3 = cycle(e.t4, {{"u", "l"}, {"r", "u"}, {"d", "r"}});
    o.t4 = cycle(e.t1, {{"r", "u"}, {"d", "r"}, {"l", "d"}});
  }
  return out;
}

inline std::vector<double> corner_spectrum(const Tensor& c) {
  MatrixView v = to_matrix(c, {c.labels()[0]}, {c.labels()[1]});
  Eigen::BDCSVD<Eigen::MatrixXd> svd(v.m);
  std::vector<double> s(svd.singularValues().data(),
                        svd.singularValues().data() + svd.singularValues().size());
  double nrm = 0.0;
  for (double x : s) nrm += x * x;
  nrm = std::sqrt(nrm);
  if (nrm > 0.0)
    for (double& x : s) x /= nrm;
  return s;
}

inline double spectra_delta(const std::array<std::vector<double>, 8>& a,
                            const std::array<std::vector<double>, 8>& b) {
  double delta = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const std::size_t n = std::max(a[i].size(), b[i].size());
    for (std::size_t k = 0; k < n; ++k) {
      const double va = k < a[i].size() ? a[i][k] : 0.0;
      const double vb = k < b[i].size() ? b[i][k] : 0.0;
      delta = std::max(delta, std::abs(va - vb));
    }
  }
  return delta;
}

inline void update_spectra(CtmEnvironment& E) {
  for (int s = 0; s < 2; ++s) {
    const auto& e = E.env[static_cast<std::size_t>(s)];
    E.corner_spectra[static_cast<std::size_t>(s) * 4 + 0] = corner_spectrum(e.c1);
    E.corner_spectra[static_cast<std::size_t>(s) * 4 + 1] = corner_spectrum(e.c2);
    E.corner_spectra[static_cast<std::size_t>(s) * 4 + 2] = corner_spectrum(e.c3);
    E.corner_spectra[static_cast<std::size_t>(s) * 4 + 3] = corner_spectrum(e.c4);
  }
}

}  // namespace ctm_detail

/// Directional corner transfer matrix contraction of the checkerboard
/// network. Runs absorption sweeps in all four directions until the corner
/// spectra stop changing (gauge-free metric) or max_iter is reached.
inline CtmEnvironment ctm_converge(const IPepsState& state, const CtmConfig& cfg) {
  using namespace ctm_detail;
  if (!(cfg.tol > 0.0)) throw ArgumentError("ctm tol must be positive");
  const int chi = resolved_chi(cfg, state.bond_dim);

  CtmEnvironment E;
  E.chi = chi;
  E.site[0] = double_layer(state.a);
  E.site[1] = double_layer(state.b);
  ctm_detail::normalize(E.site[0]);
  ctm_detail::normalize(E.site[1]);

  // initial environment: boundary legs of the double tensors traced out.
  // edges around sublattice s live on sites of the opposite parity.
  for (int s = 0; s < 2; ++s) {
    const Tensor& own = E.site[static_cast<std::size_t>(s)];
    const Tensor& other = E.site[static_cast<std::size_t>(1 - s)];
    auto& e = E.env[static_cast<std::size_t>(s)];
    e.c1 = traced(own, {"u", "l"});
    e.c2 = traced(own, {"u", "r"});
    e.c3 = traced(own, {"d", "r"});
    e.c4 = traced(own, {"d", "l"});
    e.t1 = traced(other, {"u"});
    e.t2 = traced(other, {"r"});
    e.t3 = traced(other, {"d"});
    e.t4 = traced(other, {"l"});
    for (Tensor* t : {&e.c1, &e.c2, &e.c3, &e.c4, &e.t1, &e.t2, &e.t3, &e.t4})
      ctm_detail::normalize(*t);
  }

  update_spectra(E);
  auto prev = E.corner_spectra;
  for (int iter = 1; iter <= cfg.max_iter; ++iter) {
    for (int dir = 0; dir < 4; ++dir) {
      const std::uint64_t seed = seed_hash({0xC7Bu, static_cast<std::uint64_t>(iter),
                                            static_cast<std::uint64_t>(dir)});
      left_move(E, 0, chi, seed);
      left_move(E, 1, chi, seed + 7);
      E = rotate_ccw(E);
    }
    update_spectra(E);
    const double delta = spectra_delta(E.corner_spectra, prev);
    prev = E.corner_spectra;
    E.iterations = iter;
    if (delta < cfg.tol) {
      E.converged = true;
      break;
    }
  }
  return E;
}

// ---------------------------------------------------------------------------
// measurements
// ---------------------------------------------------------------------------

namespace ctm_detail {

/// Closed one-site patch: ring of environment tensors of sublattice s around
/// the given double tensor.
inline double patch_one_site(const CtmEnvironment& E, int s, const Tensor& dbl) {
  const auto& e = E.env[static_cast<std::size_t>(s)];
  Tensor l = contract(e.c4.renamed("r", "br"), e.t4.renamed("u", "tu").renamed("r", "mr"),
                      LabelPairs{{"u", "d"}});
  l = contract(l, e.c1.renamed("r", "tr"), LabelPairs{{"tu", "d"}});
  Tensor x = contract(l, e.t1.renamed("r", "tr2").renamed("d", "md"), LabelPairs{{"tr", "l"}});
  x = contract(x, dbl.renamed("d", "ad").renamed("r", "ar"),
               LabelPairs{{"mr", "l"}, {"md", "u"}});
  x = contract(x, e.t3.renamed("r", "br2"), LabelPairs{{"br", "l"}, {"ad", "u"}});
  Tensor r = contract(e.c2.renamed("l", "tl"), e.t2.renamed("l", "ml").renamed("d", "md2"),
                      LabelPairs{{"d", "u"}});
  r = contract(r, e.c3.renamed("l", "bl"), LabelPairs{{"md2", "u"}});
  Tensor val = contract(x, r, LabelPairs{{"tr2", "tl"}, {"ar", "ml"}, {"br2", "bl"}});
  return val.data()[0];
}

/// Closed two-site horizontal patch with (possibly operator-carrying) double
/// tensors on the left (sublattice s) and right (sublattice 1-s) sites.
inline double patch_two_site(const CtmEnvironment& E, int s, const Tensor& left_dbl,
                             const Tensor& right_dbl) {
  const int sb = 1 - s;
  const auto& el = E.env[static_cast<std::size_t>(s)];
  const auto& er = E.env[static_cast<std::size_t>(sb)];

  Tensor l = contract(el.c4.renamed("r", "br"), el.t4.renamed("u", "tu").renamed("r", "mr"),
                      LabelPairs{{"u", "d"}});
  l = contract(l, el.c1.renamed("r", "tr"), LabelPairs{{"tu", "d"}});
  l = contract(l, el.t1.renamed("r", "tr2").renamed("d", "md"), LabelPairs{{"tr", "l"}});
  l = contract(l, left_dbl.renamed("d", "ad").renamed("r", "ar"),
               LabelPairs{{"mr", "l"}, {"md", "u"}});
  l = contract(l, el.t3.renamed("r", "br2"), LabelPairs{{"br", "l"}, {"ad", "u"}});
  // l: (tr2, ar, br2)

  Tensor r = contract(er.c2.renamed("l", "tl"), er.t2.renamed("l", "ml").renamed("d", "md2"),
                      LabelPairs{{"d", "u"}});
  r = contract(r, er.c3.renamed("l", "bl"), LabelPairs{{"md2", "u"}});
  r = contract(r, er.t1.renamed("l", "tl2").renamed("d", "md"), LabelPairs{{"tl", "r"}});
  r = contract(r, right_dbl.renamed("d", "ad").renamed("l", "al"),
               LabelPairs{{"ml", "r"}, {"md", "u"}});
  r = contract(r, er.t3.renamed("l", "bl2"), LabelPairs{{"bl", "r"}, {"ad", "u"}});
  // r: (tl2, al, bl2)

  Tensor val = contract(l, r, LabelPairs{{"tr2", "tl2"}, {"ar", "al"}, {"br2", "bl2"}});
  return val.data()[0];
}

/// Split one fused (ket,bra) leg `name` of extent D^2 into (name_k, name_b).
inline Tensor split_leg(const Tensor& t, const std::string& name, std::size_t D) {
  const std::size_t pos = t.label_position(name);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < t.rank(); ++i)
    if (i != pos) order.push_back(i);
  order.push_back(pos);
  Tensor p = permute(t, order);
  Shape shape = p.shape();
  Labels labels = p.labels();
  shape.pop_back();
  labels.pop_back();
  shape.push_back(D);
  shape.push_back(D);
  labels.push_back(name + "_k");
  labels.push_back(name + "_b");
  return reshape(p, shape, labels);
}

/// Half of the open-physical-index two-site patch. `left_half` selects the
/// (C4,T4,C1 | T1,site,T3) strip, otherwise the mirrored right strip.
/// Output labels: chi_top, p (ket phys), pb (bra phys), bond_k, bond_b,
/// chi_bot, where bond is the leg facing the other half.
inline Tensor open_half(const CtmEnvironment& E, int s, const Tensor& site_single,
                        bool left_half) {
  const auto& e = E.env[static_cast<std::size_t>(s)];
  const std::size_t D = site_single.extent(1);
  Tensor ket = site_single.with_labels({"p", "u", "l", "d", "r"});
  Tensor bra = ket.with_labels({"pb", "ub", "lb", "db", "rb"});

  if (left_half) {
    Tensor l = contract(e.c4.renamed("r", "br"), e.t4.renamed("u", "tu").renamed("r", "mr"),
                        LabelPairs{{"u", "d"}});
    l = contract(l, e.c1.renamed("r", "tr"), LabelPairs{{"tu", "d"}});
    l = contract(l, e.t1.renamed("r", "tr2").renamed("d", "md"), LabelPairs{{"tr", "l"}});
    l = split_leg(split_leg(l, "mr", D), "md", D);
    l = contract(l, ket, LabelPairs{{"mr_k", "l"}, {"md_k", "u"}});
    l = contract(l, bra, LabelPairs{{"mr_b", "lb"}, {"md_b", "ub"}});
    Tensor t3s = split_leg(e.t3.renamed("r", "br2"), "u", D);
    l = contract(l, t3s, LabelPairs{{"br", "l"}, {"d", "u_k"}, {"db", "u_b"}});
    // labels now: tr2, p, r, pb, rb, br2
    return l;
  }
  Tensor r = contract(e.c2.renamed("l", "tl"), e.t2.renamed("l", "ml").renamed("d", "md2"),
                      LabelPairs{{"d", "u"}});
  r = contract(r, e.c3.renamed("l", "bl"), LabelPairs{{"md2", "u"}});
  r = contract(r, e.t1.renamed("l", "tl2").renamed("d", "md"), LabelPairs{{"tl", "r"}});
  r = split_leg(split_leg(r, "ml", D), "md", D);
  r = contract(r, ket, LabelPairs{{"ml_k", "r"}, {"md_k", "u"}});
  r = contract(r, bra, LabelPairs{{"ml_b", "rb"}, {"md_b", "ub"}});
  Tensor t3s = split_leg(e.t3.renamed("l", "bl2"), "u", D);
  r = contract(r, t3s, LabelPairs{{"bl", "r"}, {"d", "u_k"}, {"db", "u_b"}});
  // labels now: tl2, p, l, pb, lb, bl2
  return r;
}

}  // namespace ctm_detail

/// Expectation value of a single-dimer operator on sublattice s.
inline double expect_one_site(const IPepsState& state, const CtmEnvironment& env, int s,
                              const Eigen::MatrixXd& op) {
  using namespace ctm_detail;
  // numerator and denominator double tensors must come from the same build
  // (the cached env.site copies are rescaled for the absorption sweeps)
  const Tensor& site = s == 0 ? state.a : state.b;
  const double num = patch_one_site(env, s, double_layer(site, &op));
  const double den = patch_one_site(env, s, double_layer(site));
  if (std::abs(den) < 1e-300) throw ContractionError("one-site norm patch is zero");
  return num / den;
}

/// Intra-dimer correlation <S_1 . S_2> on sublattice s.
inline double dimer_correlation(const IPepsState& state, const CtmEnvironment& env, int s) {
  return expect_one_site(state, env, s, Eigen::MatrixXd(dimer_spin_operators().intra));
}

namespace ctm_detail {

/// Environment + single-layer site tensors rotated so that the requested
/// bond becomes the horizontal (left sublattice `s`) bond.
struct OrientedView {
  CtmEnvironment env;
  Tensor site_a, site_b;  // single layer, original sublattices
  int left_sublattice = 0;
};

inline Tensor rotate_site_single(const Tensor& site) {
  // (p,u,l,d,r) -> new legs u'=r, l'=u, d'=l, r'=d
  return permute(site, {0, 4, 1, 2, 3});
}

inline OrientedView oriented_view(const IPepsState& state, const CtmEnvironment& env,
                                  Bond bond) {
  OrientedView view;
  switch (bond) {
    case Bond::a_right:
      view.env = env;
      view.site_a = state.a;
      view.site_b = state.b;
      view.left_sublattice = 0;
      break;
    case Bond::a_left:
      view.env = env;
      view.site_a = state.a;
      view.site_b = state.b;
      view.left_sublattice = 1;
      break;
    case Bond::a_down:
      view.env = rotate_ccw(env);
      view.site_a = rotate_site_single(state.a);
      view.site_b = rotate_site_single(state.b);
      view.left_sublattice = 0;
      break;
    case Bond::a_up:
      view.env = rotate_ccw(env);
      view.site_a = rotate_site_single(state.a);
      view.site_b = rotate_site_single(state.b);
      view.left_sublattice = 1;
      break;
  }
  return view;
}

/// <h_bond> for a 16x16 two-dimer operator via its operator-Schmidt
/// decomposition h = sum_k X_k (x) Y_k; no reduced density matrix is formed.
inline double expect_bond(const IPepsState& state, const CtmEnvironment& env, Bond bond,
                          const Eigen::MatrixXd& h16) {
  OrientedView view = oriented_view(state, env, bond);
  const int s = view.left_sublattice;
  const Tensor& left_single = s == 0 ? view.site_a : view.site_b;
  const Tensor& right_single = s == 0 ? view.site_b : view.site_a;

  // h(p', q', p, q) -> M[(p' p), (q' q)]
  MatrixRM h_rm = h16;
  Tensor h_t = reshape(Tensor({16, 16}, std::vector<double>(h_rm.data(), h_rm.data() + 256)),
                       {4, 4, 4, 4});
  Tensor m_t = permute(h_t, {0, 2, 1, 3});
  Eigen::Map<const MatrixRM> m(m_t.data().data(), 16, 16);
  Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m),
                                     Eigen::ComputeThinU | Eigen::ComputeThinV);

  const double den = patch_two_site(view.env, s, double_layer(left_single),
                                    double_layer(right_single));
  if (std::abs(den) < 1e-300) throw ContractionError("two-site norm patch is zero");

  double num = 0.0;
  for (Eigen::Index k = 0; k < svd.singularValues().size(); ++k) {
    const double sv = svd.singularValues()[k];
    if (sv < 1e-14 * svd.singularValues()[0]) break;
    // column k of U reshaped row-major: U[(p' p), k] -> X(p', p)
    Eigen::Matrix4d x_op, y_op;
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) {
        x_op(a, b) = svd.matrixU()(4 * a + b, k) * std::sqrt(sv);
        y_op(a, b) = svd.matrixV()(4 * a + b, k) * std::sqrt(sv);
      }
    Eigen::MatrixXd x_m = x_op, y_m = y_op;
    num += patch_two_site(view.env, s, double_layer(left_single, &x_m),
                          double_layer(right_single, &y_m));
  }
  return num / den;
}

}  // namespace ctm_detail

/// Energy per dimer assembled to match the full Hamiltonian: the intra-dimer
/// term averaged over the two sublattices plus half the sum over the four
/// bond orientations of the pure inter-dimer part.
inline double energy(const IPepsState& state, const CtmEnvironment& env,
                     const ModelParams& params) {
  const double intra_a = dimer_correlation(state, env, 0);
  const double intra_b = dimer_correlation(state, env, 1);
  double e = params.j_perp * 0.5 * (intra_a + intra_b);
  if (params.j_par != 0.0 || params.j_x != 0.0) {
    const Eigen::MatrixXd h_pure = bond_matrix(params, 0.0);
    for (Bond bond : kBondOrder)
      e += 0.5 * ctm_detail::expect_bond(state, env, bond, h_pure);
  }
  return e;
}

/// Two-dimer reduced density matrix on the given bond, as a 16x16 matrix in
/// the (left, right) dimer product basis. Symmetrized and trace-normalized.
struct Rdm2 {
  Tensor matrix;  ///< shape (16, 16)
  Bond orientation = Bond::a_right;
};

inline Rdm2 rdm2(const IPepsState& state, const CtmEnvironment& env,
                 Bond orientation = Bond::a_right) {
  using namespace ctm_detail;
  OrientedView view = oriented_view(state, env, orientation);
  const int s = view.left_sublattice;
  const Tensor& left_single = s == 0 ? view.site_a : view.site_b;
  const Tensor& right_single = s == 0 ? view.site_b : view.site_a;

  Tensor half_l = open_half(view.env, s, left_single, true);
  Tensor half_r = open_half(view.env, 1 - s, right_single, false);
  Tensor raw = contract(half_l, half_r,
                        LabelPairs{{"tr2", "tl2"}, {"r", "l"}, {"rb", "lb"}, {"br2", "bl2"}});
  // label collision drops labels; positional order is (p_l, pb_l, p_r, pb_r)
  Tensor rho_t = permute(raw, {0, 2, 1, 3});  // (p_l, p_r, pb_l, pb_r)
  Tensor rho16 = reshape(rho_t, {16, 16});

  Eigen::Map<const MatrixRM> m(rho16.data().data(), 16, 16);
  Eigen::MatrixXd sym = 0.5 * (Eigen::MatrixXd(m) + Eigen::MatrixXd(m.transpose()));
  const double tr = sym.trace();
  if (std::abs(tr) < 1e-300) throw ContractionError("rdm2 has zero trace");
  sym /= tr;
  MatrixRM rm = sym;
  Rdm2 out;
  out.matrix = Tensor({16, 16}, std::vector<double>(rm.data(), rm.data() + rm.size()));
  out.orientation = orientation;
  return out;
}

/// Energy per dimer re-assembled from reduced density matrices:
/// trace(rho2 . h_pure) on each bond plus the intra-dimer term from the
/// one-site reduction of the horizontal rdm2. Independent assembly path used
/// to cross-check energy().
inline double energy_from_rdm2(const IPepsState& state, const CtmEnvironment& env,
                               const ModelParams& params) {
  const Eigen::MatrixXd h_pure = bond_matrix(params, 0.0);
  double e = 0.0;
  // intra-dimer part from the 1-site reductions of the a_right rdm2
  Rdm2 horizontal = rdm2(state, env, Bond::a_right);
  Eigen::Map<const MatrixRM> rho(horizontal.matrix.data().data(), 16, 16);
  Eigen::Matrix4d rho_left = Eigen::Matrix4d::Zero(), rho_right = Eigen::Matrix4d::Zero();
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 4; ++c) {
        rho_left(a, b) += rho(4 * a + c, 4 * b + c);
        rho_right(a, b) += rho(4 * c + a, 4 * c + b);
      }
  const Eigen::Matrix4d intra = dimer_spin_operators().intra;
  e += params.j_perp * 0.5 * ((rho_left * intra).trace() + (rho_right * intra).trace());
  for (Bond bond : kBondOrder) {
    Rdm2 r = rdm2(state, env, bond);
    Eigen::Map<const MatrixRM> rr(r.matrix.data().data(), 16, 16);
    e += 0.5 * (Eigen::MatrixXd(rr) * h_pure).trace();
  }
  return e;
}

// ---------------------------------------------------------------------------
// post-selection
// ---------------------------------------------------------------------------

/// Run the evolution for every config, contract each candidate once to get
/// its energy, and keep the lowest-energy one (ties broken by lowest seed).
inline SimulationResult post_select(const ModelParams& params,
                                    const std::vector<SuConfig>& configs,
                                    const CtmConfig& ctm_cfg) {
  if (configs.empty()) throw ArgumentError("post_select needs at least one config");
  struct Candidate {
    SimulationResult result;
    double energy = 0.0;
    bool ctm_converged = false;
  };
  std::vector<Candidate> candidates;
  candidates.reserve(configs.size());
  for (const auto& cfg : configs) {
    Candidate c;
    c.result = evolve(params, cfg);
    try {
      CtmEnvironment env = ctm_converge(c.result.state, ctm_cfg);
      c.energy = energy(c.result.state, env, params);
      c.ctm_converged = env.converged;
    } catch (const Error&) {
      c.energy = std::numeric_limits<double>::infinity();
      c.ctm_converged = false;
    }
    candidates.push_back(std::move(c));
  }

  auto better = [](const Candidate& x, const Candidate& y) {
    const bool xc = x.result.converged, yc = y.result.converged;
    if (xc != yc) return xc;  // converged candidates outrank unconverged ones
    if (x.energy != y.energy) return x.energy < y.energy;
    return x.result.seed < y.result.seed;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i)
    if (better(candidates[i], candidates[best])) best = i;

  SimulationResult out = std::move(candidates[best].result);
  for (const auto& c : candidates)
    out.candidates.push_back({c.result.seed, c.energy, c.result.converged, c.ctm_converged});
  return out;
}

}  // namespace phasemap
