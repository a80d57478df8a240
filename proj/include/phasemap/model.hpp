#pragma once

#include <array>
#include <cstddef>

#include <Eigen/Dense>

#include "phasemap/tensor.hpp"

namespace phasemap {

/// Couplings of the frustrated bilayer Heisenberg model. j_par is the
/// intralayer coupling (the unit of energy on the benchmark grids), j_perp
/// the intra-dimer coupling, j_x the crossed interlayer coupling.
struct ModelParams {
  double j_perp = 0.0;
  double j_par = 1.0;
  double j_x = 0.0;
};

/// The four inequivalent bonds of the two-site checkerboard cell, named by
/// the leg of the A tensor they attach to. This order is a global convention:
/// feature vectors and stored states depend on it.
enum class Bond : int { a_right = 0, a_down = 1, a_left = 2, a_up = 3 };

inline constexpr std::array<Bond, 4> kBondOrder{Bond::a_right, Bond::a_down, Bond::a_left,
                                                Bond::a_up};

namespace detail {

inline Eigen::Matrix2d spin_sz() {
  Eigen::Matrix2d m;
  m << 0.5, 0.0, 0.0, -0.5;
  return m;
}
inline Eigen::Matrix2d spin_sp() {
  Eigen::Matrix2d m;
  m << 0.0, 1.0, 0.0, 0.0;
  return m;
}

inline Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

}  // namespace detail

/// Spin operators of one dimer in the 4-dimensional basis
/// |uu>, |ud>, |du>, |dd> (first arrow = layer 1). All matrices are real;
/// the S^y S^y part of any Heisenberg coupling is carried by the
/// (S+ S- + S- S+)/2 combination.
struct DimerOps {
  std::array<Eigen::Matrix4d, 2> sz;  ///< S^z of layer 1 and 2
  std::array<Eigen::Matrix4d, 2> sp;  ///< S^+
  std::array<Eigen::Matrix4d, 2> sm;  ///< S^-
  Eigen::Matrix4d intra;              ///< S_1 . S_2 within the dimer
};

inline DimerOps dimer_spin_operators() {
  using detail::kron;
  const Eigen::Matrix2d sz = detail::spin_sz();
  const Eigen::Matrix2d sp = detail::spin_sp();
  const Eigen::Matrix2d sm = sp.transpose();
  const Eigen::Matrix2d id = Eigen::Matrix2d::Identity();

  DimerOps ops;
  ops.sz[0] = kron(sz, id);
  ops.sz[1] = kron(id, sz);
  ops.sp[0] = kron(sp, id);
  ops.sp[1] = kron(id, sp);
  ops.sm[0] = kron(sm, id);
  ops.sm[1] = kron(id, sm);
  ops.intra = ops.sz[0] * ops.sz[1] +
              0.5 * (ops.sp[0] * ops.sm[1] + ops.sm[0] * ops.sp[1]);
  return ops;
}

namespace detail {

/// Heisenberg coupling S_a . S_b between layer `la` of the left dimer and
/// layer `lb` of the right dimer, as a 16x16 matrix on (left x right).
inline Eigen::MatrixXd heisenberg_16(const DimerOps& ops, int la, int lb) {
  return kron(ops.sz[static_cast<std::size_t>(la)], ops.sz[static_cast<std::size_t>(lb)]) +
         0.5 * (kron(ops.sp[static_cast<std::size_t>(la)], ops.sm[static_cast<std::size_t>(lb)]) +
                kron(ops.sm[static_cast<std::size_t>(la)], ops.sp[static_cast<std::size_t>(lb)]));
}

}  // namespace detail

/// Two-dimer bond Hamiltonian as a 16x16 matrix:
/// J_par (S_i1.S_j1 + S_i2.S_j2) + J_x (S_i1.S_j2 + S_i2.S_j1)
/// + onsite_share * J_perp * (S_i1.S_i2 + S_j1.S_j2).
inline Eigen::MatrixXd bond_matrix(const ModelParams& params, double onsite_share) {
  const DimerOps ops = dimer_spin_operators();
  const Eigen::MatrixXd id4 = Eigen::MatrixXd::Identity(4, 4);
  Eigen::MatrixXd h = params.j_par * (detail::heisenberg_16(ops, 0, 0) +
                                      detail::heisenberg_16(ops, 1, 1)) +
                      params.j_x * (detail::heisenberg_16(ops, 0, 1) +
                                    detail::heisenberg_16(ops, 1, 0));
  h += onsite_share * params.j_perp *
       (detail::kron(ops.intra, id4) + detail::kron(id4, ops.intra));
  return h;
}

struct BondHamiltonian {
  Tensor matrix;      ///< shape (4,4,4,4): (left out, right out, left in, right in)
  double onsite_share = 0.25;
};

/// The bond Hamiltonian of one checkerboard orientation. With every dimer
/// participating in 4 bonds, onsite_share = 1/4 makes the sum over bonds
/// reproduce the full Hamiltonian exactly. The matrix is the same for all
/// four orientations; the orientation argument is part of the contract so
/// callers never have to know that.
inline BondHamiltonian build_bond_hamiltonian(const ModelParams& params, Bond /*orientation*/,
                                              double onsite_share = 0.25) {
  Eigen::MatrixXd h = bond_matrix(params, onsite_share);
  MatrixRM rm = h;
  BondHamiltonian bond;
  bond.matrix = Tensor({4, 4, 4, 4}, std::vector<double>(rm.data(), rm.data() + rm.size()));
  bond.onsite_share = onsite_share;
  return bond;
}

struct GateSet {
  double tau = 0.0;
  std::array<Tensor, 4> gates;  ///< one per Bond orientation, shape (4,4,4,4)
};

/// Imaginary-time gates exp(-tau * H_bond), first-order Trotter convention
/// (the four bond gates are applied sequentially within a sweep).
inline GateSet build_gates(const ModelParams& params, double tau) {
  if (!(tau > 0.0)) throw ArgumentError("tau must be positive");
  GateSet set;
  set.tau = tau;
  Eigen::MatrixXd h = bond_matrix(params, 0.25);
  MatrixRM rm = h;
  Tensor h_t({16, 16}, std::vector<double>(rm.data(), rm.data() + rm.size()));
  Tensor gate = reshape(expm_hermitian(h_t, -tau), {4, 4, 4, 4});
  for (auto bond : kBondOrder) set.gates[static_cast<std::size_t>(bond)] = gate;
  return set;
}

/// Gate lookup by orientation.
inline const Tensor& gate_for(const GateSet& set, Bond bond) {
  return set.gates[static_cast<std::size_t>(bond)];
}

}  // namespace phasemap
