#ifndef SBS_BCI_HPP
#define SBS_BCI_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "dsp.hpp"

namespace sbs::bci {

// Analysis defaults for the motor-imagery path. The band and post-cue
// interval are conventions, not physics, so they stay configurable.
struct BciConfig {
  double band_low_hz = 8.0;
  double band_high_hz = 32.0;
  int filter_order = 4;
  double interval_start_s = 0.75;  // window relative to the cue, seconds
  double interval_end_s = 2.00;
  int csp_m = 3;  // filters kept per class
};

// ---------------------------------------------------------------------------
// Covariance utilities.

// Covariance of one epoch (channels x samples), rows centered, normalized by
// its trace so every trial contributes equal total power. Throws
// Errc::singular (ZeroVariance) on an epoch with no signal power.
Eigen::MatrixXd epoch_covariance(const Eigen::Ref<const Eigen::MatrixXd>& epoch);

// Mean of covariance samples, shrunk toward nu*I (nu = trace/dim) with a
// Ledoit-Wolf style analytic intensity: the estimated variance of the mean
// divided by the mean's squared distance from the isotropic target, clipped
// to [0, 1]. Identical samples or an already-isotropic mean get intensity 0.
struct ShrunkCovariance {
  Eigen::MatrixXd cov;
  double intensity = 0.0;
  double nu = 0.0;
};
ShrunkCovariance shrunk_mean_covariance(const std::vector<Eigen::MatrixXd>& samples);

// ---------------------------------------------------------------------------
// Common spatial patterns.

struct CspModel {
  int m = 0;                // filters per class; filters has 2m rows
  int class_a = 0;          // label whose variance fraction eigvals reports
  int class_b = 0;
  Eigen::MatrixXd filters;  // 2m x channels; rows are spatial filters w_i
  Eigen::VectorXd eigvals;  // descending, in (0,1): w_i cov_a w_i^T
  Eigen::MatrixXd cov_a;    // shrunk training covariances the filters
  Eigen::MatrixXd cov_b;    // simultaneously diagonalize
  double band_low_hz = 8.0;
  double band_high_hz = 32.0;
  double interval_start_s = 0.75;
  double interval_end_s = 2.00;
};

// Trains CSP filters from labeled epochs (already bandpassed and windowed;
// see prepare_trials). Solves the generalized eigenproblem
// cov_a v = lambda (cov_a + cov_b) v and keeps the m eigenvectors from each
// end of the spectrum, so each filter's normalized variances under the two
// classes pair to 1. Requires exactly two classes with >= 2 trials each and
// 2m <= channels. Throws Errc::singular (RankDeficientCovariance) when the
// composite covariance is not positive definite even after shrinkage.
CspModel train_csp(const dsp::TrialSet& trials, int m, const BciConfig& cfg = {});

// Log-variance features: f_i = log(var(w_i^T X) / sum_j var(w_j^T X)).
// Scale-invariant by construction. Throws Errc::singular (ZeroVariance) if a
// filtered signal has no variance.
Eigen::VectorXd csp_features(const Eigen::Ref<const Eigen::MatrixXd>& epoch,
                             const CspModel& model);

struct FeatureSet {
  Eigen::MatrixXd features;  // trials x 2m
  std::vector<int> labels;
};
FeatureSet csp_feature_set(const dsp::TrialSet& trials, const CspModel& model);

// ---------------------------------------------------------------------------
// Gaussian classifiers on feature vectors.

enum class ClassifierKind { Lda, QuadraticGaussian };

struct ClassifierModel {
  ClassifierKind kind = ClassifierKind::Lda;
  std::vector<int> labels;            // sorted distinct class labels
  Eigen::MatrixXd means;              // classes x dim
  std::vector<Eigen::MatrixXd> covs;  // one shared (LDA) or one per class
  Eigen::VectorXd priors;             // sums to 1
};

struct Classification {
  int label = 0;
  Eigen::VectorXd posterior;  // per class, aligned with model.labels
};

// Maximum-likelihood Gaussian fit with the same analytic shrinkage as CSP
// (class-centered outer products as the covariance samples). A class whose
// scatter is exactly zero (single training point) falls back to the identity
// so the model stays defined. Throws Errc::invalid_argument on shape errors,
// Errc::singular (SingularCovariance) if a covariance stays indefinite.
ClassifierModel train_classifier(const Eigen::Ref<const Eigen::MatrixXd>& features,
                                 const std::vector<int>& labels,
                                 ClassifierKind kind = ClassifierKind::Lda);

// Maximum-posterior label with the full posterior (softmax over class
// log-densities plus log-priors).
Classification classify(const Eigen::Ref<const Eigen::VectorXd>& feature,
                        const ClassifierModel& model);

// ---------------------------------------------------------------------------
// Trial preparation: zero-phase bandpass each epoch, then cut the configured
// post-cue interval. Input epochs must cover [interval_start, interval_end]
// relative to the cue. The result's t_pre/t_post describe the cut window.

dsp::TrialSet prepare_trials(const dsp::TrialSet& trials, const BciConfig& cfg = {});

// ---------------------------------------------------------------------------
// Cross-validation harness.

struct CvOptions {
  std::vector<long> train_sizes;  // empty = use full training folds
  ClassifierKind kind = ClassifierKind::Lda;
  std::uint64_t seed = 1;
};

struct CvCell {
  int m = 0;
  long train_size = 0;        // trials used to train each evaluation
  double mean_accuracy = 0;   // over repeats
  double sd_accuracy = 0;     // over repeats (0 when repeats == 1)
  long n_eval = 0;            // classifications behind each repeat's accuracy
};

struct CvTable {
  std::vector<CvCell> cells;
  std::string to_csv() const;
};

// Stratified k-fold CV, re-randomized each repeat from a seeded generator.
// Fold assignment is canonicalized by trial_id, so permuting the input order
// cannot change the result. Throws Errc::insufficient_data
// (InsufficientTrials) when a class is too small to give every fold a test
// trial and every training split >= 2 trials.
CvTable cross_validate(const dsp::TrialSet& trials, const std::vector<int>& m_values,
                       int folds, int repeats, const CvOptions& opts = {});

// ---------------------------------------------------------------------------
// Persisted decoder = CSP + classifier, for train-once / evaluate-later runs.

struct DecoderModel {
  CspModel csp;
  ClassifierModel classifier;

  std::string to_json() const;
  static DecoderModel from_json(const std::string& text);
  void save(const std::string& path) const;
  static DecoderModel load(const std::string& path);
};

DecoderModel train_decoder(const dsp::TrialSet& prepared, const BciConfig& cfg = {});

// Classifies one prepared epoch (bandpassed + windowed like the training set).
Classification predict(const Eigen::Ref<const Eigen::MatrixXd>& epoch,
                       const DecoderModel& model);

}  // namespace sbs::bci

#endif  // SBS_BCI_HPP
