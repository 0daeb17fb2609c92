#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace hbias::testing {

std::vector<double> naive_pairwise_cosine(const float* data, std::size_t n, std::size_t dim) {
  std::vector<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double dot = 0.0;
      double ni = 0.0;
      double nj = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        const double a = data[i * dim + k];
        const double b = data[j * dim + k];
        dot += a * b;
        ni += a * a;
        nj += b * b;
      }
      out.push_back(dot / (std::sqrt(ni) * std::sqrt(nj)));
    }
  }
  return out;
}

bool near_rel(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(1.0, std::abs(b)); }

Eigen::VectorXd ols(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) { return x.householderQr().solve(y); }

double ols_loglik(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  const Eigen::VectorXd r = y - x * ols(x, y);
  const double n = static_cast<double>(y.size());
  const double s2 = r.squaredNorm() / n;
  return -0.5 * n * (std::log(2.0 * std::numbers::pi * s2) + 1.0);
}

DenseProblem dense_problem(std::span<const lmm::ResponseBlock> blocks, const lmm::DesignLayout& layout) {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.y.size();
  DenseProblem p;
  p.x.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(layout.p()));
  p.y.resize(static_cast<Eigen::Index>(n));
  std::vector<std::string> labels;
  Eigen::Index row = 0;
  for (const auto& b : blocks) {
    auto it = std::find(labels.begin(), labels.end(), b.group);
    if (it == labels.end()) {
      labels.push_back(b.group);
      it = labels.end() - 1;
    }
    const auto g = static_cast<std::size_t>(it - labels.begin());
    const Eigen::VectorXd xr = layout.row(b.race, b.gender);
    for (double v : b.y) {
      p.x.row(row) = xr.transpose();
      p.y(row) = v;
      p.group.push_back(g);
      ++row;
    }
  }
  p.n_groups = labels.size();
  return p;
}

double dense_marginal_loglik(const DenseProblem& p, const Eigen::VectorXd& beta, double sigma2, double tau2) {
  const auto n = p.y.size();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n) * sigma2;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (p.group[static_cast<std::size_t>(i)] == p.group[static_cast<std::size_t>(j)]) v(i, j) += tau2;
    }
  }
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(v);
  const Eigen::VectorXd r = p.y - p.x * beta;
  const double logdet = ldlt.vectorD().array().log().sum();
  const double quad = r.dot(ldlt.solve(r));
  return -0.5 * (logdet + quad + static_cast<double>(n) * std::log(2.0 * std::numbers::pi));
}

DenseOracle::DenseOracle(const DenseProblem& p) : n_(static_cast<std::size_t>(p.y.size())) {
  const auto n = p.y.size();
  xt_.resize(n, p.x.cols());
  yt_.resize(n);
  d_.resize(n);
  Eigen::Index out = 0;
  for (std::size_t g = 0; g < p.n_groups; ++g) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (p.group[static_cast<std::size_t>(i)] == g) rows.push_back(i);
    }
    const auto m = static_cast<Eigen::Index>(rows.size());
    const Eigen::MatrixXd zz = Eigen::MatrixXd::Ones(m, m);
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(zz);
    const Eigen::MatrixXd& q = es.eigenvectors();
    Eigen::MatrixXd xg(m, p.x.cols());
    Eigen::VectorXd yg(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      xg.row(k) = p.x.row(rows[static_cast<std::size_t>(k)]);
      yg(k) = p.y(rows[static_cast<std::size_t>(k)]);
    }
    xt_.middleRows(out, m) = q.transpose() * xg;
    yt_.segment(out, m) = q.transpose() * yg;
    // Eigenvalues of an all-ones matrix are {m, 0, ..., 0}; clamp rounding noise.
    d_.segment(out, m) = es.eigenvalues().cwiseMax(0.0);
    out += m;
  }
}

DenseFit DenseOracle::profile(double lambda) const {
  const Eigen::VectorXd w = (1.0 + lambda * d_.array()).inverse();
  const Eigen::MatrixXd a = xt_.transpose() * w.asDiagonal() * xt_;
  const Eigen::VectorXd b = xt_.transpose() * w.asDiagonal() * yt_;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
  DenseFit f;
  f.beta = ldlt.solve(b);
  const Eigen::VectorXd r = yt_ - xt_ * f.beta;
  const double rss = (w.array() * r.array().square()).sum();
  const double n = static_cast<double>(n_);
  f.lambda = lambda;
  f.sigma2 = rss / n;
  f.tau2 = lambda * f.sigma2;
  f.loglik = -0.5 * (n * (std::log(2.0 * std::numbers::pi * f.sigma2) + 1.0) + (lambda * d_.array()).log1p().sum());
  f.cov_beta = f.sigma2 * ldlt.solve(Eigen::MatrixXd::Identity(a.rows(), a.cols()));
  return f;
}

double DenseOracle::score(double lambda) const {
  const Eigen::ArrayXd w = (1.0 + lambda * d_.array()).inverse();
  const Eigen::MatrixXd a = xt_.transpose() * w.matrix().asDiagonal() * xt_;
  const Eigen::VectorXd b = xt_.transpose() * w.matrix().asDiagonal() * yt_;
  const Eigen::VectorXd beta = a.ldlt().solve(b);
  const Eigen::ArrayXd r = (yt_ - xt_ * beta).array();
  const double rss = (w * r.square()).sum();
  const double n = static_cast<double>(n_);
  const double trace = (d_.array() * w).sum();
  const double quad = (d_.array() * w.square() * r.square()).sum();
  return lambda * (-0.5 * trace + 0.5 * n * quad / rss);
}

DenseFit DenseOracle::fit() const {
  DenseFit best = profile(0.0);
  double prev_x = -25.0;
  double prev_s = score(std::exp(prev_x));
  for (double x = -24.5; x <= 25.0; x += 0.5) {
    const double s = score(std::exp(x));
    if (prev_s > 0.0 && s <= 0.0) {
      double lo = prev_x;
      double hi = x;
      for (int it = 0; it < 200 && hi - lo > 0.0; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        (score(std::exp(mid)) > 0.0 ? lo : hi) = mid;
      }
      const auto cand = profile(std::exp(0.5 * (lo + hi)));
      if (cand.loglik > best.loglik) best = cand;
    }
    prev_x = x;
    prev_s = s;
  }
  return best;
}

}  // namespace hbias::testing
