#include "inverse.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>
#include <Eigen/SparseCholesky>

namespace sbs::inverse {

namespace {
constexpr double kPriorRidge = 1e-6;
}

SpatialPrior build_laplacian(const std::vector<std::vector<int>>& adjacency, double smoothness) {
  const int nd = static_cast<int>(adjacency.size());
  if (nd == 0) fail(Errc::invalid_argument, "EmptyMesh: adjacency has no vertices");
  if (!(smoothness >= 0.0 && smoothness <= 1.0))
    fail(Errc::invalid_argument, "smoothness must lie in [0, 1], got " +
                                     format_double(smoothness));

  SpatialPrior prior;
  prior.smoothness = smoothness;
  prior.is_identity = smoothness == 0.0;

  if (prior.is_identity) {
    prior.coherence.resize(nd, nd);
    prior.coherence.setIdentity();
    prior.precision = prior.coherence;
    return prior;
  }

  // L = I - smoothness * D^-1 W
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(nd) * 8);
  for (int i = 0; i < nd; ++i) {
    const auto& nbrs = adjacency[static_cast<std::size_t>(i)];
    for (int j : nbrs) {
      if (j < 0 || j >= nd)
        fail(Errc::invalid_argument, "adjacency references vertex outside mesh");
      const auto& back = adjacency[static_cast<std::size_t>(j)];
      if (std::find(back.begin(), back.end(), i) == back.end())
        fail(Errc::invalid_argument, "adjacency is not symmetric (" + std::to_string(i) +
                                         " -> " + std::to_string(j) + " only)");
      trips.emplace_back(i, j, -smoothness / static_cast<double>(nbrs.size()));
    }
    trips.emplace_back(i, i, 1.0);
  }
  prior.coherence.resize(nd, nd);
  prior.coherence.setFromTriplets(trips.begin(), trips.end());

  Eigen::SparseMatrix<double> m = Eigen::SparseMatrix<double>(prior.coherence.transpose()) *
                                  prior.coherence;
  Eigen::SparseMatrix<double> ridge(nd, nd);
  ridge.setIdentity();
  prior.precision = m + kPriorRidge * ridge;
  return prior;
}

SpatialPrior minimum_norm_prior(int n_vertices) {
  return build_laplacian(std::vector<std::vector<int>>(static_cast<std::size_t>(n_vertices)),
                         0.0);
}

// ---------------------------------------------------------------------------

Solver::Solver(const ForwardModel& model, const SpatialPrior& prior, double alpha0, double beta0) {
  nc_ = model.n_channels();
  nd_ = model.n_vertices();
  if (nc_ < 1 || nd_ < 1) fail(Errc::invalid_argument, "solver: empty gain matrix");
  if (prior.precision.rows() != nd_)
    fail(Errc::invalid_argument, "solver: prior size " + std::to_string(prior.precision.rows()) +
                                     " does not match " + std::to_string(nd_) + " vertices");
  if (!model.gain.allFinite()) fail(Errc::non_finite, "solver: gain has non-finite entries");
  set_hyperparameters(alpha0, beta0);
  k_ = std::min(nc_, nd_);

  Eigen::MatrixXd whitened;  // A R^-1
  if (prior.is_identity) {
    whitened = model.gain;
    minv_diag_ = Eigen::VectorXd::Ones(nd_);
    Eigen::BDCSVD<Eigen::MatrixXd> svd(whitened, Eigen::ComputeFullU | Eigen::ComputeThinV);
    u_ = svd.matrixU();
    d_ = Eigen::VectorXd::Zero(nc_);
    d_.head(std::min<long>(k_, svd.singularValues().size())) =
        svd.singularValues().head(std::min<long>(k_, svd.singularValues().size()));
    w_ = svd.matrixV().leftCols(k_);
    return;
  }

  // M = P^T Ll Ll^T P  (Eigen factors P M P^T = Ll Ll^T), so R = Ll^T P satisfies
  // M = R^T R and R^-1 = P^T Ll^-T.
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(prior.precision);
  if (llt.info() != Eigen::Success)
    fail(Errc::singular, "SingularPrior: prior precision is not positive definite");

  Eigen::MatrixXd pat = llt.permutationP() * model.gain.transpose();  // P A^T
  Eigen::MatrixXd at_white = llt.matrixL().solve(pat);                // Ll^-1 P A^T
  whitened = at_white.transpose();

  Eigen::BDCSVD<Eigen::MatrixXd> svd(whitened, Eigen::ComputeFullU | Eigen::ComputeThinV);
  u_ = svd.matrixU();
  d_ = Eigen::VectorXd::Zero(nc_);
  d_.head(std::min<long>(k_, svd.singularValues().size())) =
      svd.singularValues().head(std::min<long>(k_, svd.singularValues().size()));
  Eigen::MatrixXd x = llt.matrixU().solve(svd.matrixV().leftCols(k_));  // Ll^-T V
  w_ = llt.permutationP().transpose() * x;

  // diag(M^-1): squared norms of R^-T e_j = Ll^-1 P e_j.
  minv_diag_.resize(nd_);
  Eigen::VectorXd ej = Eigen::VectorXd::Zero(nd_);
  for (int j = 0; j < nd_; ++j) {
    ej[j] = 1.0;
    Eigen::VectorXd pe = llt.permutationP() * ej;
    minv_diag_[j] = llt.matrixL().solve(pe).squaredNorm();
    ej[j] = 0.0;
  }
}

void Solver::set_hyperparameters(double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta))
    fail(Errc::invalid_argument, "hyperparameters must be finite and positive");
  alpha_ = alpha;
  beta_ = beta;
}

Eigen::MatrixXd Solver::posterior_mean(const Eigen::Ref<const Eigen::MatrixXd>& y) const {
  if (y.rows() != nc_) fail(Errc::invalid_argument, "frame has wrong channel count");
  if (!y.allFinite()) fail(Errc::non_finite, "frame contains non-finite samples");
  Eigen::MatrixXd z = u_.transpose() * y;  // N_c x N_t
  for (int i = 0; i < k_; ++i)
    z.row(i) *= beta_ * d_[i] / (beta_ * d_[i] * d_[i] + alpha_);
  return w_ * z.topRows(k_);
}

Eigen::MatrixXd Solver::posterior_mean_rows(const Eigen::Ref<const Eigen::MatrixXd>& y,
                                            const std::vector<int>& rows) const {
  if (y.rows() != nc_) fail(Errc::invalid_argument, "frame has wrong channel count");
  if (!y.allFinite()) fail(Errc::non_finite, "frame contains non-finite samples");
  Eigen::MatrixXd z = u_.transpose() * y;
  for (int i = 0; i < k_; ++i)
    z.row(i) *= beta_ * d_[i] / (beta_ * d_[i] * d_[i] + alpha_);
  Eigen::MatrixXd sub(static_cast<long>(rows.size()), y.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= nd_)
      fail(Errc::invalid_argument, "vertex index out of range");
    sub.row(static_cast<long>(r)) = w_.row(rows[r]) * z.topRows(k_);
  }
  return sub;
}

Eigen::VectorXd Solver::posterior_var_diag() const {
  Eigen::VectorXd var = minv_diag_ / alpha_;
  for (int i = 0; i < k_; ++i) {
    double gamma = 1.0 / (beta_ * d_[i] * d_[i] + alpha_) - 1.0 / alpha_;
    var += gamma * w_.col(i).cwiseAbs2();
  }
  return var.cwiseMax(0.0);
}

Eigen::VectorXd Solver::spectral_energy(const Eigen::Ref<const Eigen::MatrixXd>& y) const {
  return (u_.transpose() * y).rowwise().squaredNorm();
}

double Solver::evidence_from_energy(const Eigen::VectorXd& zsq, long n_t) const {
  double logdet = 0.0, quad = 0.0;
  for (int i = 0; i < nc_; ++i) {
    double lambda = d_[i] * d_[i] / alpha_ + 1.0 / beta_;
    logdet += std::log(lambda);
    quad += zsq[i] / lambda;
  }
  return -0.5 * (nc_ * static_cast<double>(n_t) * std::log(2.0 * M_PI) +
                 static_cast<double>(n_t) * logdet + quad);
}

double Solver::log_evidence(const Eigen::Ref<const Eigen::MatrixXd>& y) const {
  if (y.rows() != nc_) fail(Errc::invalid_argument, "frame has wrong channel count");
  if (!y.allFinite()) fail(Errc::non_finite, "frame contains non-finite samples");
  return evidence_from_energy(spectral_energy(y), y.cols());
}

AdaptReport Solver::adapt(const Eigen::Ref<const Eigen::MatrixXd>& y, int max_iters, double tol) {
  if (y.rows() != nc_) fail(Errc::invalid_argument, "frame has wrong channel count");
  if (y.cols() < 1) fail(Errc::invalid_argument, "frame needs at least one sample");
  if (!y.allFinite()) fail(Errc::non_finite, "frame contains non-finite samples");
  if (max_iters < 1) fail(Errc::invalid_argument, "max_iters must be >= 1");

  const long n_t = y.cols();
  const Eigen::VectorXd zsq = spectral_energy(y);
  const double alpha_in = alpha_, beta_in = beta_;

  AdaptReport report;
  report.evidence.push_back(evidence_from_energy(zsq, n_t));

  for (int it = 0; it < max_iters; ++it) {
    // All four EM traces collapse onto the N_c spectral coordinates:
    //   E2 = Σ_t s̄^T M s̄,  T2 = tr(M Σ_s)   (source side)
    //   E1 = Σ_t |y - A s̄|²,  T1 = tr(A Σ_s A^T)   (sensor side)
    double e1 = 0.0, e2 = 0.0, t1 = 0.0, t2 = 0.0;
    for (int i = 0; i < nc_; ++i) {
      double dsq = d_[i] * d_[i];
      double denom = beta_ * dsq + alpha_;
      double g = beta_ * d_[i] / denom;
      e2 += g * g * zsq[i];
      double miss = alpha_ / denom;  // 1 - d_i g_i
      e1 += miss * miss * zsq[i];
      t1 += dsq / denom;
      if (i < k_) t2 += 1.0 / denom;
    }
    t2 += static_cast<double>(nd_ - k_) / alpha_;

    double alpha_new = nd_ * static_cast<double>(n_t) / (e2 + n_t * t2);
    double beta_new = nc_ * static_cast<double>(n_t) / (e1 + n_t * t1);
    if (!std::isfinite(alpha_new) || !std::isfinite(beta_new) || alpha_new <= 0.0 ||
        beta_new <= 0.0) {
      alpha_ = alpha_in;
      beta_ = beta_in;
      fail(Errc::non_finite, "NonFiniteUpdate: hyperparameter update degenerated (alpha=" +
                                 format_double(alpha_new) + ", beta=" + format_double(beta_new) +
                                 ")");
    }

    double rel = std::max(std::abs(alpha_new - alpha_) / alpha_,
                          std::abs(beta_new - beta_) / beta_);
    alpha_ = alpha_new;
    beta_ = beta_new;
    report.evidence.push_back(evidence_from_energy(zsq, n_t));
    ++report.iterations;
    if (rel < tol) {
      report.converged = true;
      break;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

RoiPowerTracker::RoiPowerTracker(int window_samples) : window_(window_samples) {
  if (window_samples < 1) fail(Errc::invalid_argument, "RoiPowerTracker: window must be >= 1");
  ring_.assign(static_cast<std::size_t>(window_samples), 0.0);
}

void RoiPowerTracker::reset() {
  std::fill(ring_.begin(), ring_.end(), 0.0);
  count_ = 0;
  sum_ = 0.0;
}

double RoiPowerTracker::push(const Eigen::Ref<const Eigen::VectorXd>& roi_sample) {
  if (roi_sample.size() == 0) fail(Errc::invalid_argument, "RoiPowerTracker: empty sample");
  double q = roi_sample.squaredNorm() / static_cast<double>(roi_sample.size());
  std::size_t slot = static_cast<std::size_t>(count_ % window_);
  sum_ += q - ring_[slot];
  ring_[slot] = q;
  ++count_;
  double denom = static_cast<double>(std::min<std::int64_t>(count_, window_));
  return sum_ / denom;
}

TrialStats trial_average(const std::vector<Eigen::VectorXd>& trials) {
  if (trials.size() < 2)
    fail(Errc::invalid_argument, "trial_average needs at least 2 trials, got " +
                                     std::to_string(trials.size()));
  const long n = trials.front().size();
  for (const auto& t : trials)
    if (t.size() != n)
      fail(Errc::invalid_argument, "LengthMismatch: trials have different lengths (" +
                                       std::to_string(t.size()) + " vs " + std::to_string(n) +
                                       ")");
  TrialStats stats;
  stats.mean = Eigen::VectorXd::Zero(n);
  for (const auto& t : trials) stats.mean += t;
  stats.mean /= static_cast<double>(trials.size());

  Eigen::VectorXd ss = Eigen::VectorXd::Zero(n);
  for (const auto& t : trials) ss += (t - stats.mean).cwiseAbs2();
  stats.sd = (ss / static_cast<double>(trials.size() - 1)).cwiseSqrt();
  return stats;
}

}  // namespace sbs::inverse
