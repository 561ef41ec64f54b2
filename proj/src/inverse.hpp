#ifndef SBS_INVERSE_HPP
#define SBS_INVERSE_HPP

#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "common.hpp"
#include "forward.hpp"

namespace sbs::inverse {

// ---------------------------------------------------------------------------
// Spatial prior: sources s are modeled as N(0, (alpha * L^T L)^-1). L = I
// gives the minimum-norm solution; L = I - smoothness * D^-1 W couples each
// vertex to its mesh neighbors (LORETA-style spatial coherence).

struct SpatialPrior {
  Eigen::SparseMatrix<double> coherence;   // L
  Eigen::SparseMatrix<double> precision;   // M = L^T L, plus ridge off the identity path
  double smoothness = 0.0;
  bool is_identity = true;
};

// smoothness = 0 returns the exact identity prior (minimum norm, no ridge).
// Otherwise L = I - smoothness * D^-1 W from the adjacency and the precision
// carries a 1e-6 ridge so a pure Laplacian's constant null vector cannot make
// it singular. Throws Errc::invalid_argument for an empty or asymmetric mesh
// (EmptyMesh) or smoothness outside [0, 1].
SpatialPrior build_laplacian(const std::vector<std::vector<int>>& adjacency, double smoothness);

// Convenience: prior for a model (mesh from the model's adjacency).
SpatialPrior minimum_norm_prior(int n_vertices);

// ---------------------------------------------------------------------------
// Posterior solver with online evidence-maximization of alpha (source
// precision scale) and beta (noise precision).
//
// The heavy algebra happens once at construction: with M = R^T R (sparse
// Cholesky) and the whitened gain A R^-1 = U diag(d) V^T, every per-frame
// quantity reduces to the N_c spectral coordinates z = U^T y:
//   posterior mean  s̄ = W (g ∘ z),  W = R^-1 V,  g_i = beta d_i/(beta d_i² + alpha)
//   EM traces and log-evidence cost O(N_c) per iteration given Σ_t z².

struct AdaptReport {
  int iterations = 0;
  bool converged = false;
  // log-evidence trajectory: entry 0 is before the first update, then one
  // entry per iteration. Non-decreasing (EM ascent).
  std::vector<double> evidence;
};

class Solver {
 public:
  // Factorizes the prior and the whitened gain. alpha0/beta0 seed the
  // hyperparameters. Throws Errc::invalid_argument on dimension mismatch.
  Solver(const ForwardModel& model, const SpatialPrior& prior, double alpha0 = 1.0,
         double beta0 = 1.0);

  int n_channels() const { return nc_; }
  int n_vertices() const { return nd_; }

  // Posterior mean sources for a frame (channels x samples) -> N_d x N_t.
  Eigen::MatrixXd posterior_mean(const Eigen::Ref<const Eigen::MatrixXd>& y) const;

  // Selected rows only (e.g. one ROI) -> rows.size() x N_t.
  Eigen::MatrixXd posterior_mean_rows(const Eigen::Ref<const Eigen::MatrixXd>& y,
                                      const std::vector<int>& rows) const;

  // Marginal posterior variance per vertex (depends on alpha/beta, not y).
  Eigen::VectorXd posterior_var_diag() const;

  // EM fixed point:
  //   alpha <- N_d N_t / (Σ_t s̄_t^T M s̄_t + N_t tr(M Σ_s))
  //   beta  <- N_c N_t / (Σ_t |y_t - A s̄_t|² + N_t tr(A Σ_s A^T))
  // recomputing the posterior each round, until the relative change of both
  // is < tol or max_iters is hit. Throws Errc::non_finite (NonFiniteUpdate)
  // with the previous state restored if an update degenerates.
  AdaptReport adapt(const Eigen::Ref<const Eigen::MatrixXd>& y, int max_iters = 10,
                    double tol = 1e-4);

  // Gaussian log marginal likelihood of the frame under current alpha/beta.
  double log_evidence(const Eigen::Ref<const Eigen::MatrixXd>& y) const;

  double alpha() const { return alpha_; }
  double beta() const { return beta_; }
  void set_hyperparameters(double alpha, double beta);

 private:
  int nc_ = 0, nd_ = 0, k_ = 0;  // k_ = stored singular values, min(nc, nd)
  double alpha_ = 1.0, beta_ = 1.0;
  Eigen::MatrixXd u_;          // N_c x N_c, full left singular basis
  Eigen::VectorXd d_;          // length N_c, zero-padded past k_
  Eigen::MatrixXd w_;          // N_d x k_, back-transform R^-1 V
  Eigen::VectorXd minv_diag_;  // diag(M^-1)

  Eigen::VectorXd spectral_energy(const Eigen::Ref<const Eigen::MatrixXd>& y) const;
  double evidence_from_energy(const Eigen::VectorXd& zsq, long n_t) const;
};

// ---------------------------------------------------------------------------
// ROI power: per sample, the spatial mean square of the ROI's posterior
// means, smoothed by a sliding mean over `window_samples` (default 0.5 s
// worth). Values are nAm².

class RoiPowerTracker {
 public:
  explicit RoiPowerTracker(int window_samples);

  // Feed one sample of ROI source means; returns the smoothed power using
  // up to the last `window_samples` samples.
  double push(const Eigen::Ref<const Eigen::VectorXd>& roi_sample);

  void reset();

 private:
  int window_;
  std::vector<double> ring_;
  std::int64_t count_ = 0;
  double sum_ = 0.0;
};

// Pointwise mean and sample standard deviation over trials of equal length.
// Throws Errc::invalid_argument for fewer than 2 trials or length mismatch
// (LengthMismatch).
struct TrialStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
};
TrialStats trial_average(const std::vector<Eigen::VectorXd>& trials);

}  // namespace sbs::inverse

#endif  // SBS_INVERSE_HPP
