#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "phasemap/tensor.hpp"

using namespace phasemap;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  return Tensor::random_uniform(std::move(shape), rng);
}

double max_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("contract: identity against a vector") {
  Tensor id = Tensor::identity(3);
  Tensor v({3}, {1.5, -2.0, 0.25});
  Tensor r = contract(id, v, IndexPairs{{1, 0}});
  REQUIRE(r.shape() == Shape{3});
  CHECK(max_diff(r, v) == 0.0);
}

TEST_CASE("contract: 2x2 matrix product against four-term sums") {
  Tensor a = random_tensor({2, 2}, 11);
  Tensor b = random_tensor({2, 2}, 12);
  Tensor r = contract(a, b, IndexPairs{{1, 0}});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double expect = a({i, 0}) * b({0, j}) + a({i, 1}) * b({1, j});
      CHECK_THAT(r({i, j}), Catch::Matchers::WithinAbs(expect, 1e-14));
    }
}

TEST_CASE("contract: random rank-3 tensors match reshape+matmul and brute force") {
  Tensor a = random_tensor({2, 3, 4}, 21);
  Tensor b = random_tensor({2, 3, 4}, 22);
  Tensor r = contract(a, b, IndexPairs{{2, 2}});
  REQUIRE(r.shape() == Shape{2, 3, 2, 3});

  // reshape+matmul oracle: (6x4) times (4x6)
  Eigen::MatrixXd ma(6, 4), mb(4, 6);
  for (int i = 0; i < 6; ++i)
    for (int k = 0; k < 4; ++k) ma(i, k) = a.data()[static_cast<std::size_t>(i * 4 + k)];
  for (int j = 0; j < 6; ++j)
    for (int k = 0; k < 4; ++k) mb(k, j) = b.data()[static_cast<std::size_t>(j * 4 + k)];
  Eigen::MatrixXd mr = ma * mb;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      CHECK_THAT(r.data()[static_cast<std::size_t>(i * 6 + j)],
                 Catch::Matchers::WithinAbs(mr(i, j), 1e-13));

  Tensor rb = oracles::contract_bruteforce(a, b, IndexPairs{{2, 2}});
  CHECK(max_diff(r, rb) < 1e-13);
}

TEST_CASE("contract: multi-pair contraction against brute force") {
  Tensor a = random_tensor({3, 2, 4, 2}, 31);
  Tensor b = random_tensor({2, 5, 3}, 32);
  Tensor r = contract(a, b, IndexPairs{{1, 0}, {0, 2}});
  Tensor rb = oracles::contract_bruteforce(a, b, IndexPairs{{1, 0}, {0, 2}});
  CHECK(max_diff(r, rb) < 1e-13);
}

TEST_CASE("contract: extent mismatch throws") {
  Tensor a = random_tensor({2, 3}, 41);
  Tensor b = random_tensor({2, 3}, 42);
  CHECK_THROWS_AS(contract(a, b, IndexPairs{{1, 0}}), DimensionError);
}

TEST_CASE("contract is bilinear") {
  Rng rng(77);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor a = random_tensor({3, 4, 2}, 100 + static_cast<std::uint64_t>(trial));
    Tensor b = random_tensor({4, 3, 5}, 200 + static_cast<std::uint64_t>(trial));
    const double alpha = rng.uniform_pm1() * 3.0;
    Tensor lhs = contract(a.scaled(alpha), b, IndexPairs{{1, 0}, {0, 1}});
    Tensor rhs = contract(a, b, IndexPairs{{1, 0}, {0, 1}}).scaled(alpha);
    double scale = std::max(1.0, rhs.max_abs());
    CHECK(max_diff(lhs, rhs) / scale < 1e-12);
  }
}

TEST_CASE("permute: identity returns the tensor unchanged") {
  Tensor a = random_tensor({2, 3, 4}, 51);
  Tensor p = permute(a, {0, 1, 2});
  CHECK(max_diff(a, p) == 0.0);
}

TEST_CASE("permute: involution with the inverse permutation is exact") {
  Tensor a = random_tensor({2, 3, 4, 5}, 52);
  std::vector<std::size_t> order{2, 0, 3, 1};
  std::vector<std::size_t> inverse(order.size());
  for (std::size_t k = 0; k < order.size(); ++k) inverse[order[k]] = k;
  Tensor back = permute(permute(a, order), inverse);
  REQUIRE(back.shape() == a.shape());
  CHECK(back.data() == a.data());
}

TEST_CASE("permute: (1,0) on a 2x3 matrix is its transpose") {
  Tensor a = random_tensor({2, 3}, 53);
  Tensor t = permute(a, {1, 0});
  REQUIRE(t.shape() == Shape{3, 2});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(t({j, i}) == a({i, j}));
}

TEST_CASE("permute: invalid order throws") {
  Tensor a = random_tensor({2, 3}, 54);
  CHECK_THROWS_AS(permute(a, {0, 0}), ArgumentError);
  CHECK_THROWS_AS(permute(a, {0}), ArgumentError);
}

TEST_CASE("labels: propagate through permute and contract") {
  Tensor a = random_tensor({2, 3}, 61).with_labels({"u", "r"});
  Tensor b = random_tensor({3, 4}, 62).with_labels({"l", "d"});
  Tensor c = contract(a, b, LabelPairs{{"r", "l"}});
  REQUIRE(c.labels() == Labels{"u", "d"});
  Tensor p = permute(a, {1, 0});
  REQUIRE(p.labels() == Labels{"r", "u"});
  CHECK_THROWS_AS(a.with_labels({"x", "x"}), ArgumentError);
}

TEST_CASE("to_matrix/from_matrix round trip") {
  Tensor a = random_tensor({2, 3, 4}, 63).with_labels({"x", "y", "z"});
  MatrixView v = to_matrix(a, {"z", "x"}, {"y"});
  REQUIRE(v.m.rows() == 8);
  REQUIRE(v.m.cols() == 3);
  Tensor back = from_matrix(v.m, v.row_shape, v.row_labels, v.col_shape, v.col_labels);
  Tensor expect = permute(a, {2, 0, 1});
  CHECK(max_diff(back, expect) == 0.0);
}

TEST_CASE("svd: rank-1 matrix keeps a single value") {
  std::vector<double> u{1.0, -2.0, 0.5};
  std::vector<double> w{2.0, 1.0, -1.0, 0.5};
  Tensor a({3, 4});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) a({i, j}) = u[i] * w[j];
  SvdResult res = svd_truncated(a, {0}, 4, 0.0);
  double nu = std::sqrt(1.0 + 4.0 + 0.25);
  double nw = std::sqrt(4.0 + 1.0 + 1.0 + 0.25);
  REQUIRE(res.s.size() == 1);
  CHECK_THAT(res.s[0], Catch::Matchers::WithinAbs(nu * nw, 1e-12));
  CHECK(res.truncation_error < 1e-12);
}

TEST_CASE("svd: identity 4x4 truncated to rank 2") {
  Tensor a = Tensor::identity(4);
  SvdResult res = svd_truncated(a, {0}, 2, 0.0);
  REQUIRE(res.s.size() == 2);
  CHECK_THAT(res.s[0], Catch::Matchers::WithinAbs(1.0, 1e-14));
  CHECK_THAT(res.s[1], Catch::Matchers::WithinAbs(1.0, 1e-14));
  CHECK_THAT(res.truncation_error, Catch::Matchers::WithinAbs(std::sqrt(2.0) / 2.0, 1e-12));
}

TEST_CASE("svd: full-rank reconstruction of a random 6x6 matrix") {
  Tensor a = random_tensor({6, 6}, 71);
  SvdResult res = svd_truncated(a, {0}, 6, 0.0);
  // rebuild u.diag(s).v
  Tensor us = res.u;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < res.s.size(); ++k) us({i, k}) *= res.s[k];
  Tensor rec = contract(us, res.v, IndexPairs{{1, 0}});
  CHECK(max_diff(rec, a) / a.norm() < 1e-10);
}

TEST_CASE("svd: reconstruction error equals truncation_error * norm") {
  Tensor a = random_tensor({8, 5}, 72);
  SvdResult res = svd_truncated(a, {0}, 3, 0.0);
  Tensor us = res.u;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t k = 0; k < res.s.size(); ++k) us({i, k}) *= res.s[k];
  Tensor rec = contract(us, res.v, IndexPairs{{1, 0}});
  double err = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = rec.data()[i] - a.data()[i];
    err += d * d;
  }
  err = std::sqrt(err);
  CHECK_THAT(err, Catch::Matchers::WithinAbs(res.truncation_error * a.norm(), 1e-10));
}

TEST_CASE("svd: factors have orthonormal columns") {
  Tensor a = random_tensor({4, 3, 5}, 73);
  SvdResult res = svd_truncated(a, {0, 2}, 12, 0.0);
  const std::size_t k = res.s.size();
  Eigen::MatrixXd u(20, k), vt(k, 3);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < k; ++j)
      u(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          res.u.data()[i * k + j];
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      vt(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          res.v.data()[i * 3 + j];
  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(k),
                                                  static_cast<Eigen::Index>(k));
  CHECK(((u.transpose() * u) - eye).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(((vt * vt.transpose()) - eye).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("svd: singular values are gauge invariant under orthogonal transforms") {
  Rng rng(81);
  Tensor a = random_tensor({6, 6}, 82);
  Eigen::MatrixXd q = oracles::random_orthogonal(6, rng);
  Tensor qa({6, 6});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 6; ++k)
        s += q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) * a({k, j});
      qa({i, j}) = s;
    }
  SvdResult r1 = svd_truncated(a, {0}, 6, 0.0);
  SvdResult r2 = svd_truncated(qa, {0}, 6, 0.0);
  REQUIRE(r1.s.size() == r2.s.size());
  for (std::size_t i = 0; i < r1.s.size(); ++i)
    CHECK_THAT(r1.s[i], Catch::Matchers::WithinAbs(r2.s[i], 1e-10));
}

TEST_CASE("svd: descending order and cutoff behavior") {
  Tensor a({3, 3});
  a({0, 0}) = 5.0;
  a({1, 1}) = 1.0;
  a({2, 2}) = 1e-14;
  SvdResult res = svd_truncated(a, {0}, 3, 1e-10);
  REQUIRE(res.s.size() == 2);  // 1e-14 is below 1e-10 * 5
  CHECK(res.s[0] >= res.s[1]);
}

TEST_CASE("expm: zero matrix gives the identity") {
  Tensor z({4, 4});
  Tensor e = expm_hermitian(z, -0.7);
  CHECK(max_diff(e, Tensor::identity(4)) < 1e-14);
}

TEST_CASE("expm: diagonal case") {
  Tensor d({3, 3});
  d({0, 0}) = 1.0;
  d({1, 1}) = -2.0;
  d({2, 2}) = 0.25;
  double s = -0.3;
  Tensor e = expm_hermitian(d, s);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK_THAT(e({i, i}), Catch::Matchers::WithinAbs(std::exp(s * d({i, i})), 1e-13));
  CHECK_THAT(e({0, 1}), Catch::Matchers::WithinAbs(0.0, 1e-14));
}

TEST_CASE("expm: random symmetric 4x4 matches the Taylor oracle") {
  for (int trial = 0; trial < 5; ++trial) {
    Tensor g = random_tensor({4, 4}, 900 + static_cast<std::uint64_t>(trial));
    Tensor h({4, 4});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) h({i, j}) = 0.5 * (g({i, j}) + g({j, i}));
    double tau = 0.37;
    Tensor e = expm_hermitian(h, -tau);
    Eigen::MatrixXd oracle = oracles::expm_taylor(-tau * oracles::as_matrix(h));
    double diff = (oracles::as_matrix(e) - oracle).norm();
    CHECK(diff < 1e-10);
  }
}

TEST_CASE("expm: exp(h,s) * exp(h,-s) is the identity") {
  Tensor g = random_tensor({5, 5}, 91);
  Tensor h({5, 5});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) h({i, j}) = 0.5 * (g({i, j}) + g({j, i}));
  Tensor plus = expm_hermitian(h, 0.42);
  Tensor minus = expm_hermitian(h, -0.42);
  Tensor prod = contract(plus, minus, IndexPairs{{1, 0}});
  CHECK(max_diff(prod, Tensor::identity(5)) < 1e-10);
}

TEST_CASE("expm: asymmetric input throws") {
  Tensor a = random_tensor({3, 3}, 92);
  a({0, 1}) += 1.0;
  CHECK_THROWS_AS(expm_hermitian(a, 1.0), ArgumentError);
}

TEST_CASE("reshape: merges and splits without touching data") {
  Tensor a = random_tensor({2, 3, 4}, 93);
  Tensor m = reshape(a, {6, 4});
  CHECK(m.data() == a.data());
  CHECK_THROWS_AS(reshape(a, {5, 5}), DimensionError);
}
