#pragma once

// Convex quadratic program
//
//   minimize    1/2 x'Hx + g'x
//   subject to  A x  = b
//               G x <= h
//               lb <= x <= ub
//
// solved by a sparse Mehrotra predictor-corrector interior-point method,
// followed by an active-set polish that re-solves the KKT system exactly.

#include "pourplan/common.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace pourplan {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

struct QPProblem {
  SpMat H;  ///< symmetric positive semi-definite; both triangles stored
  VecX g;
  SpMat A;
  VecX b;
  SpMat G;
  VecX h;
  VecX lb;  ///< -inf for no bound; empty for none at all
  VecX ub;

  Eigen::Index n() const { return g.size(); }
};

struct QPSettings {
  double tol = 1e-10;
  int max_iter = 200;
  bool polish = true;
};

struct KKTResiduals {
  double stationarity = 0.0;
  double primal = 0.0;
  double dual = 0.0;
  double complementarity = 0.0;

  double max() const { return std::max({stationarity, primal, dual, complementarity}); }
  std::string str() const {
    std::ostringstream s;
    s << "stationarity " << stationarity << ", primal " << primal << ", dual " << dual << ", complementarity "
      << complementarity;
    return s.str();
  }
};

struct QPResult {
  VecX x;
  VecX y;        ///< equality multipliers
  VecX z;        ///< multipliers of G x <= h
  VecX z_lower;  ///< multipliers of x >= lb
  VecX z_upper;  ///< multipliers of x <= ub
  double objective = 0.0;
  int iterations = 0;
  bool polished = false;
  KKTResiduals residuals;
};

namespace detail {

/// Inequalities of a QP stacked as C x <= d, with the bound rows appended.
struct StackedInequalities {
  SpMat C;
  VecX d;
  std::vector<Eigen::Index> lower_var, upper_var;  // variable of each bound row
  Eigen::Index n_general = 0;
};

inline StackedInequalities stack_inequalities(const QPProblem& qp) {
  const Eigen::Index n = qp.n();
  StackedInequalities s;
  s.n_general = qp.G.rows();
  std::vector<Triplet> trips;
  std::vector<double> rhs;
  for (int k = 0; k < qp.G.outerSize(); ++k) {
    for (SpMat::InnerIterator it(qp.G, k); it; ++it) trips.emplace_back(it.row(), it.col(), it.value());
  }
  for (Eigen::Index i = 0; i < qp.G.rows(); ++i) rhs.push_back(qp.h(i));
  Eigen::Index row = qp.G.rows();
  if (qp.lb.size() == n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::isfinite(qp.lb(i))) {
        trips.emplace_back(row++, i, -1.0);
        rhs.push_back(-qp.lb(i));
        s.lower_var.push_back(i);
      }
    }
  }
  if (qp.ub.size() == n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::isfinite(qp.ub(i))) {
        trips.emplace_back(row++, i, 1.0);
        rhs.push_back(qp.ub(i));
        s.upper_var.push_back(i);
      }
    }
  }
  s.C.resize(row, n);
  s.C.setFromTriplets(trips.begin(), trips.end());
  s.d = Eigen::Map<const VecX>(rhs.data(), static_cast<Eigen::Index>(rhs.size()));
  return s;
}

inline void validate(const QPProblem& qp) {
  const Eigen::Index n = qp.n();
  if (qp.H.rows() != n || qp.H.cols() != n) throw InputError("qp: H must be n x n");
  if (qp.A.cols() != n && qp.A.rows() > 0) throw InputError("qp: A has wrong column count");
  if (qp.A.rows() != qp.b.size()) throw InputError("qp: A and b disagree");
  if (qp.G.cols() != n && qp.G.rows() > 0) throw InputError("qp: G has wrong column count");
  if (qp.G.rows() != qp.h.size()) throw InputError("qp: G and h disagree");
  if ((qp.lb.size() != 0 && qp.lb.size() != n) || (qp.ub.size() != 0 && qp.ub.size() != n)) {
    throw InputError("qp: bound vectors have wrong length");
  }
  if (!qp.g.allFinite()) throw InputError("qp: non-finite gradient");
  if (qp.lb.size() == n && qp.ub.size() == n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (qp.lb(i) > qp.ub(i)) throw InputError("qp: lower bound above upper bound");
    }
  }
}

inline SpMat empty_rows(const SpMat& M, Eigen::Index n) {
  if (M.rows() > 0) return M;
  SpMat E(0, n);
  return E;
}

}  // namespace detail

/// KKT residuals of (x, y, z, z_lower, z_upper) for `qp`.
inline KKTResiduals kkt_residuals(const QPProblem& qp, const QPResult& r) {
  const Eigen::Index n = qp.n();
  KKTResiduals k;
  VecX grad = qp.H * r.x + qp.g;
  if (qp.A.rows() > 0) grad += qp.A.transpose() * r.y;
  if (qp.G.rows() > 0) grad += qp.G.transpose() * r.z;
  if (r.z_upper.size() == n) grad += r.z_upper;
  if (r.z_lower.size() == n) grad -= r.z_lower;
  k.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
  auto upd = [](double& v, double x) { v = std::max(v, x); };
  if (qp.A.rows() > 0) upd(k.primal, (qp.A * r.x - qp.b).cwiseAbs().maxCoeff());
  if (qp.G.rows() > 0) {
    const VecX slack = qp.h - qp.G * r.x;
    for (Eigen::Index i = 0; i < slack.size(); ++i) {
      upd(k.primal, -slack(i));
      upd(k.dual, -r.z(i));
      upd(k.complementarity, std::abs(r.z(i) * slack(i)));
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    if (qp.lb.size() == n && std::isfinite(qp.lb(i))) {
      upd(k.primal, qp.lb(i) - r.x(i));
      upd(k.dual, -r.z_lower(i));
      upd(k.complementarity, std::abs(r.z_lower(i) * (r.x(i) - qp.lb(i))));
    }
    if (qp.ub.size() == n && std::isfinite(qp.ub(i))) {
      upd(k.primal, r.x(i) - qp.ub(i));
      upd(k.dual, -r.z_upper(i));
      upd(k.complementarity, std::abs(r.z_upper(i) * (qp.ub(i) - r.x(i))));
    }
  }
  return k;
}

namespace detail {

/// Re-solves the equality-constrained problem on the active set guessed by
/// the interior point. Returns false when the guess does not verify.
inline bool polish(const QPProblem& qp, const StackedInequalities& ineq, const VecX& s, const VecX& z,
                   VecX& x, VecX& y, VecX& zz, double tol) {
  const Eigen::Index n = qp.n(), p = qp.A.rows();
  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (z(i) > s(i)) active.push_back(i);
  }
  const auto m = static_cast<Eigen::Index>(active.size());
  std::vector<Triplet> trips;
  for (int k = 0; k < qp.H.outerSize(); ++k) {
    for (SpMat::InnerIterator it(qp.H, k); it; ++it) trips.emplace_back(it.row(), it.col(), it.value());
  }
  for (int k = 0; k < qp.A.outerSize(); ++k) {
    for (SpMat::InnerIterator it(qp.A, k); it; ++it) {
      trips.emplace_back(n + it.row(), it.col(), it.value());
      trips.emplace_back(it.col(), n + it.row(), it.value());
    }
  }
  SpMat Crow = ineq.C;  // row access through a row-major copy
  Eigen::SparseMatrix<double, Eigen::RowMajor> Cr(Crow);
  for (Eigen::Index k = 0; k < m; ++k) {
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(Cr, active[static_cast<std::size_t>(k)]);
         it; ++it) {
      trips.emplace_back(n + p + k, it.col(), it.value());
      trips.emplace_back(it.col(), n + p + k, it.value());
    }
  }
  SpMat K(n + p + m, n + p + m);
  K.setFromTriplets(trips.begin(), trips.end());
  VecX rhs(n + p + m);
  rhs.head(n) = -qp.g;
  if (p) rhs.segment(n, p) = qp.b;
  for (Eigen::Index k = 0; k < m; ++k) rhs(n + p + k) = ineq.d(active[static_cast<std::size_t>(k)]);
  Eigen::SparseLU<SpMat> lu;
  lu.analyzePattern(K);
  lu.factorize(K);
  if (lu.info() != Eigen::Success) return false;
  VecX sol = lu.solve(rhs);
  if (lu.info() != Eigen::Success || !sol.allFinite()) return false;
  // One step of iterative refinement.
  sol += lu.solve(rhs - K * sol);
  const VecX xn = sol.head(n);
  VecX zn = VecX::Zero(ineq.C.rows());
  for (Eigen::Index k = 0; k < m; ++k) zn(active[static_cast<std::size_t>(k)]) = sol(n + p + k);
  if (zn.size() && zn.minCoeff() < -tol) return false;
  if (ineq.C.rows() && (ineq.C * xn - ineq.d).maxCoeff() > tol) return false;
  if (p && (qp.A * xn - qp.b).cwiseAbs().maxCoeff() > tol) return false;
  x = xn;
  y = sol.segment(n, p);
  zz = zn.cwiseMax(0.0);
  return true;
}

}  // namespace detail

inline QPResult solve_qp(const QPProblem& qp, const QPSettings& set = {}) {
  detail::validate(qp);
  const Eigen::Index n = qp.n();
  const SpMat A = detail::empty_rows(qp.A, n);
  const Eigen::Index p = A.rows();
  const detail::StackedInequalities ineq = detail::stack_inequalities(qp);
  const SpMat& C = ineq.C;
  const VecX& d = ineq.d;
  const Eigen::Index m = C.rows();
  const SpMat Ct = C.transpose();
  const SpMat At = A.transpose();

  VecX x = VecX::Zero(n), y = VecX::Zero(p);
  VecX s = VecX::Ones(m), z = VecX::Ones(m);
  if (m) s = (d - C * x).cwiseMax(1.0);

  // Quasi-definite KKT [[H + C'WC + rho I, A'], [A, -delta I]].
  double rho = 1e-11, delta = 1e-11;
  auto assemble = [&](const VecX& w) {
    SpMat top = qp.H + SpMat(Ct * w.asDiagonal() * C);
    std::vector<Triplet> trips;
    trips.reserve(static_cast<std::size_t>(top.nonZeros() + 2 * A.nonZeros() + n + p));
    for (int k = 0; k < top.outerSize(); ++k) {
      for (SpMat::InnerIterator it(top, k); it; ++it) trips.emplace_back(it.row(), it.col(), it.value());
    }
    for (Eigen::Index i = 0; i < n; ++i) trips.emplace_back(i, i, rho);
    for (int k = 0; k < A.outerSize(); ++k) {
      for (SpMat::InnerIterator it(A, k); it; ++it) {
        trips.emplace_back(n + it.row(), it.col(), it.value());
        trips.emplace_back(it.col(), n + it.row(), it.value());
      }
    }
    for (Eigen::Index i = 0; i < p; ++i) trips.emplace_back(n + i, n + i, -delta);
    SpMat K(n + p, n + p);
    K.setFromTriplets(trips.begin(), trips.end());
    return K;
  };
  auto true_kkt = [&](const VecX& w) {
    SpMat K = assemble(w);
    for (Eigen::Index i = 0; i < n; ++i) K.coeffRef(i, i) -= rho;
    for (Eigen::Index i = 0; i < p; ++i) K.coeffRef(n + i, n + i) += delta;
    return K;
  };

  Eigen::SimplicialLDLT<SpMat, Eigen::Lower> ldlt;
  bool analysed = false;
  SpMat Ktrue;

  const double scale_g = std::max(1.0, qp.g.size() ? qp.g.cwiseAbs().maxCoeff() : 0.0);
  QPResult res;
  int it = 0;
  for (; it < set.max_iter; ++it) {
    const VecX rd = qp.H * x + qp.g + At * y + Ct * z;
    const VecX rp = A * x - qp.b;
    const VecX ri = C * x + s - d;
    const double mu = m ? s.dot(z) / static_cast<double>(m) : 0.0;
    const double err = std::max({rd.size() ? rd.cwiseAbs().maxCoeff() / scale_g : 0.0,
                                 rp.size() ? rp.cwiseAbs().maxCoeff() : 0.0,
                                 ri.size() ? ri.cwiseAbs().maxCoeff() : 0.0, mu});
    if (err < set.tol) break;

    const VecX w = m ? VecX(z.cwiseQuotient(s)) : VecX();
    // Barrier weights spread over many decades near the solution; raise the
    // regularization until the factorization holds. Iterative refinement
    // against the true KKT matrix removes its bias.
    bool factored = false;
    for (rho = 1e-11, delta = 1e-11; rho <= 1e-5; rho *= 100, delta *= 100) {
      const SpMat K = assemble(m ? w : VecX::Zero(0));
      if (!analysed) {
        ldlt.analyzePattern(K);
        analysed = true;
      }
      ldlt.factorize(K);
      // Quasi-definite: exactly n positive pivots (in permuted order).
      if (ldlt.info() == Eigen::Success && ldlt.vectorD().allFinite() &&
          (ldlt.vectorD().array() > 0.0).count() == n) {
        factored = true;
        break;
      }
    }
    if (!factored) break;
    Ktrue = true_kkt(m ? w : VecX::Zero(0));

    // Solves the Newton system for a complementarity target rc (= s.z - sigma mu).
    auto newton = [&](const VecX& rc, VecX& dx, VecX& dy, VecX& ds, VecX& dz) {
      VecX rhs(n + p);
      VecX t = VecX::Zero(n);
      if (m) t = Ct * VecX((-rc + z.cwiseProduct(ri)).cwiseQuotient(s));
      rhs.head(n) = -rd - t;
      rhs.tail(p) = -rp;
      VecX sol = ldlt.solve(rhs);
      for (int r = 0; r < 3; ++r) sol += ldlt.solve(rhs - Ktrue * sol);
      dx = sol.head(n);
      dy = sol.tail(p);
      if (m) {
        ds = -ri - C * dx;
        dz = (-rc - z.cwiseProduct(ds)).cwiseQuotient(s);
      }
    };
    auto max_step = [](const VecX& v, const VecX& dv) {
      double a = 1.0;
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (dv(i) < 0) a = std::min(a, -v(i) / dv(i));
      }
      return a;
    };

    VecX dx, dy, ds(m), dz(m);
    if (m == 0) {
      newton(VecX(), dx, dy, ds, dz);
      x += dx;
      y += dy;
      continue;
    }
    // Predictor
    newton(s.cwiseProduct(z), dx, dy, ds, dz);
    if (!dx.allFinite() || !dz.allFinite()) break;
    const double a_aff = std::min(max_step(s, ds), max_step(z, dz));
    const double mu_aff = (s + a_aff * ds).dot(z + a_aff * dz) / static_cast<double>(m);
    const double sigma = std::pow(mu_aff / mu, 3);
    // Corrector
    const VecX rc = s.cwiseProduct(z) + ds.cwiseProduct(dz) - VecX::Constant(m, sigma * mu);
    newton(rc, dx, dy, ds, dz);
    if (!dx.allFinite() || !dz.allFinite()) break;
    const double eta = std::max(0.9, 1.0 - mu);
    const double ap = std::min(1.0, eta * max_step(s, ds));
    const double ad = std::min(1.0, eta * max_step(z, dz));
    x += ap * dx;
    s += ap * ds;
    y += ad * dy;
    z += ad * dz;
  }
  res.iterations = it;

  auto unpack = [&](const VecX& zz) {
    res.z = zz.head(ineq.n_general);
    res.z_lower = VecX::Zero(n);
    res.z_upper = VecX::Zero(n);
    Eigen::Index row = ineq.n_general;
    for (Eigen::Index v : ineq.lower_var) res.z_lower(v) = zz(row++);
    for (Eigen::Index v : ineq.upper_var) res.z_upper(v) = zz(row++);
  };
  res.x = x;
  res.y = y;
  unpack(z);
  res.residuals = kkt_residuals(qp, res);

  if (set.polish) {
    VecX px = x, py = y, pz = z;
    if (detail::polish(qp, ineq, s, z, px, py, pz, 1e-9)) {
      QPResult cand = res;
      cand.x = px;
      cand.y = py;
      res.x.swap(px);
      res.y.swap(py);
      unpack(pz);
      const KKTResiduals pr = kkt_residuals(qp, res);
      if (pr.max() <= cand.residuals.max()) {
        res.residuals = pr;
        res.polished = true;
      } else {
        res.x = cand.x;
        res.y = cand.y;
        res.z = cand.z;
        res.z_lower = cand.z_lower;
        res.z_upper = cand.z_upper;
      }
    }
  }
  if (!res.x.allFinite() || !(res.residuals.max() <= 1e-6)) {
    throw ComputeError(std::string(it >= set.max_iter ? "qp: iteration cap (" + std::to_string(set.max_iter) + ") reached; "
                                                      : "qp: interior-point method stalled; ") +
                       res.residuals.str());
  }
  res.objective = 0.5 * res.x.dot(qp.H * res.x) + qp.g.dot(res.x);
  return res;
}

}  // namespace pourplan
