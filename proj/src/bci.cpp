#include "bci.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace sbs::bci {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Small helpers shared across the module.

Eigen::MatrixXd center_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) {
  return x.colwise() - x.rowwise().mean();
}

// Collects pointers per class; requires exactly two classes. Returns the two
// labels in ascending order.
struct ClassSplit {
  int label_a = 0, label_b = 0;
  std::vector<const dsp::Epoch*> a, b;
};

ClassSplit split_two_classes(const std::vector<const dsp::Epoch*>& epochs) {
  std::vector<int> labels;
  for (const dsp::Epoch* e : epochs)
    if (std::find(labels.begin(), labels.end(), e->class_label) == labels.end())
      labels.push_back(e->class_label);
  if (labels.size() != 2)
    fail(Errc::invalid_argument, "CSP training needs exactly two classes, got " +
                                     std::to_string(labels.size()));
  std::sort(labels.begin(), labels.end());
  ClassSplit s;
  s.label_a = labels[0];
  s.label_b = labels[1];
  for (const dsp::Epoch* e : epochs)
    (e->class_label == s.label_a ? s.a : s.b).push_back(e);
  return s;
}

ShrunkCovariance class_covariance(const std::vector<const dsp::Epoch*>& epochs) {
  std::vector<Eigen::MatrixXd> covs;
  covs.reserve(epochs.size());
  for (const dsp::Epoch* e : epochs) covs.push_back(epoch_covariance(e->samples));
  return shrunk_mean_covariance(covs);
}

CspModel train_csp_ptrs(const std::vector<const dsp::Epoch*>& epochs, int m,
                        const BciConfig& cfg) {
  if (m < 1) fail(Errc::invalid_argument, "CSP m must be >= 1, got " + std::to_string(m));
  ClassSplit split = split_two_classes(epochs);
  if (split.a.size() < 2 || split.b.size() < 2)
    fail(Errc::insufficient_data, "InsufficientTrials: CSP needs >= 2 trials per class, got " +
                                      std::to_string(split.a.size()) + " and " +
                                      std::to_string(split.b.size()));
  const Eigen::Index nc = split.a.front()->samples.rows();
  if (2 * m > nc)
    fail(Errc::invalid_argument, "CSP asks for " + std::to_string(2 * m) + " filters but only " +
                                     std::to_string(nc) + " channels exist");

  ShrunkCovariance ca = class_covariance(split.a);
  ShrunkCovariance cb = class_covariance(split.b);
  Eigen::MatrixXd composite = ca.cov + cb.cov;

  // The generalized solver needs the composite positive definite; shrinkage
  // usually guarantees it, but identically rank-deficient trials can defeat
  // the analytic intensity (it sees no sampling variance to correct).
  Eigen::LLT<Eigen::MatrixXd> llt(composite);
  if (llt.info() != Eigen::Success)
    fail(Errc::singular,
         "RankDeficientCovariance: composite class covariance is not positive definite");

  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(ca.cov, composite);
  if (ges.info() != Eigen::Success)
    fail(Errc::singular, "RankDeficientCovariance: generalized eigensolver failed");

  // Eigenvalues come out ascending; eigenvectors satisfy v^T composite v = 1,
  // so w cov_a w^T = lambda and w cov_b w^T = 1 - lambda automatically.
  CspModel model;
  model.m = m;
  model.class_a = split.label_a;
  model.class_b = split.label_b;
  model.cov_a = std::move(ca.cov);
  model.cov_b = std::move(cb.cov);
  model.band_low_hz = cfg.band_low_hz;
  model.band_high_hz = cfg.band_high_hz;
  model.interval_start_s = cfg.interval_start_s;
  model.interval_end_s = cfg.interval_end_s;
  model.filters.resize(2 * m, nc);
  model.eigvals.resize(2 * m);
  for (int i = 0; i < m; ++i) {  // top of the spectrum: class-a dominant
    model.filters.row(i) = ges.eigenvectors().col(nc - 1 - i).transpose();
    model.eigvals(i) = ges.eigenvalues()(nc - 1 - i);
  }
  for (int i = 0; i < m; ++i) {  // bottom: class-b dominant, kept descending
    model.filters.row(m + i) = ges.eigenvectors().col(m - 1 - i).transpose();
    model.eigvals(m + i) = ges.eigenvalues()(m - 1 - i);
  }
  return model;
}

// Per-repeat generator, decorrelated from the base seed the same way the
// simulator derives its sub-streams.
Rng repeat_rng(std::uint64_t seed, std::uint64_t repeat) {
  return Rng(seed ^ (0x9e3779b97f4a7c15ull * (repeat + 1)));
}

json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array()) fail(Errc::bad_format, "matrix field is not an array");
  const Eigen::Index nr = static_cast<Eigen::Index>(j.size());
  if (nr == 0) return {};
  const Eigen::Index nc = static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(nr, nc);
  for (Eigen::Index r = 0; r < nr; ++r) {
    const json& row = j.at(static_cast<std::size_t>(r));
    if (static_cast<Eigen::Index>(row.size()) != nc)
      fail(Errc::bad_format, "matrix rows have inconsistent lengths");
    for (Eigen::Index c = 0; c < nc; ++c)
      m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

json vector_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vector_from_json(const json& j) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j.at(static_cast<std::size_t>(i)).get<double>();
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Covariances.

Eigen::MatrixXd epoch_covariance(const Eigen::Ref<const Eigen::MatrixXd>& epoch) {
  if (epoch.rows() < 1 || epoch.cols() < 2)
    fail(Errc::invalid_argument, "epoch must have >= 1 channel and >= 2 samples");
  Eigen::MatrixXd centered = center_rows(epoch);
  Eigen::MatrixXd cov = centered * centered.transpose();
  double tr = cov.trace();
  if (!(tr > 0))
    fail(Errc::singular, "ZeroVariance: epoch has no signal power");
  return cov / tr;
}

ShrunkCovariance shrunk_mean_covariance(const std::vector<Eigen::MatrixXd>& samples) {
  if (samples.empty()) fail(Errc::invalid_argument, "no covariance samples");
  const Eigen::Index d = samples.front().rows();
  Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(d, d);
  for (const Eigen::MatrixXd& s : samples) {
    if (s.rows() != d || s.cols() != d)
      fail(Errc::invalid_argument, "covariance samples differ in shape");
    mean += s;
  }
  mean /= static_cast<double>(samples.size());

  ShrunkCovariance out;
  out.nu = mean.trace() / static_cast<double>(d);
  const Eigen::MatrixXd target = out.nu * Eigen::MatrixXd::Identity(d, d);

  const std::size_t t = samples.size();
  double num = 0.0;  // estimated variance of the mean estimator
  if (t > 1) {
    for (const Eigen::MatrixXd& s : samples) num += (s - mean).squaredNorm();
    num /= static_cast<double>(t) * static_cast<double>(t - 1);
  }
  double den = (mean - target).squaredNorm();
  out.intensity = den > 1e-30 ? std::clamp(num / den, 0.0, 1.0) : 0.0;
  out.cov = (1.0 - out.intensity) * mean + out.intensity * target;
  return out;
}

// ---------------------------------------------------------------------------
// CSP.

CspModel train_csp(const dsp::TrialSet& trials, int m, const BciConfig& cfg) {
  std::vector<const dsp::Epoch*> ptrs;
  ptrs.reserve(trials.epochs.size());
  for (const dsp::Epoch& e : trials.epochs) ptrs.push_back(&e);
  return train_csp_ptrs(ptrs, m, cfg);
}

Eigen::VectorXd csp_features(const Eigen::Ref<const Eigen::MatrixXd>& epoch,
                             const CspModel& model) {
  if (epoch.rows() != model.filters.cols())
    fail(Errc::invalid_argument, "epoch has " + std::to_string(epoch.rows()) +
                                     " channels but the CSP model expects " +
                                     std::to_string(model.filters.cols()));
  Eigen::MatrixXd projected = model.filters * epoch;
  Eigen::MatrixXd centered = center_rows(projected);
  Eigen::VectorXd variances =
      centered.rowwise().squaredNorm() / static_cast<double>(epoch.cols());
  double total = variances.sum();
  if (!(total > 0) || (variances.array() <= 0).any())
    fail(Errc::singular, "ZeroVariance: a CSP-filtered signal has no variance");
  return (variances / total).array().log();
}

FeatureSet csp_feature_set(const dsp::TrialSet& trials, const CspModel& model) {
  FeatureSet fs;
  fs.features.resize(static_cast<Eigen::Index>(trials.epochs.size()), model.filters.rows());
  fs.labels.reserve(trials.epochs.size());
  for (std::size_t i = 0; i < trials.epochs.size(); ++i) {
    fs.features.row(static_cast<Eigen::Index>(i)) =
        csp_features(trials.epochs[i].samples, model).transpose();
    fs.labels.push_back(trials.epochs[i].class_label);
  }
  return fs;
}

// ---------------------------------------------------------------------------
// Gaussian classifiers.

ClassifierModel train_classifier(const Eigen::Ref<const Eigen::MatrixXd>& features,
                                 const std::vector<int>& labels, ClassifierKind kind) {
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  if (static_cast<Eigen::Index>(labels.size()) != n)
    fail(Errc::invalid_argument, "feature rows and labels disagree: " + std::to_string(n) +
                                     " vs " + std::to_string(labels.size()));
  if (n < 1 || d < 1) fail(Errc::invalid_argument, "empty feature set");

  ClassifierModel model;
  model.kind = kind;
  model.labels = labels;
  std::sort(model.labels.begin(), model.labels.end());
  model.labels.erase(std::unique(model.labels.begin(), model.labels.end()), model.labels.end());
  const int k = static_cast<int>(model.labels.size());
  if (k < 2) fail(Errc::invalid_argument, "classifier needs >= 2 classes, got " +
                                              std::to_string(k));

  model.means.resize(k, d);
  model.priors.resize(k);
  std::vector<std::vector<Eigen::Index>> by_class(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    int c = static_cast<int>(std::lower_bound(model.labels.begin(), model.labels.end(),
                                              labels[static_cast<std::size_t>(i)]) -
                             model.labels.begin());
    by_class[static_cast<std::size_t>(c)].push_back(i);
  }
  for (int c = 0; c < k; ++c) {
    const auto& idx = by_class[static_cast<std::size_t>(c)];
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(d);
    for (Eigen::Index i : idx) mu += features.row(i);
    mu /= static_cast<double>(idx.size());
    model.means.row(c) = mu;
    model.priors(c) = static_cast<double>(idx.size()) / static_cast<double>(n);
  }

  // Covariances from class-centered outer products, shrunk with the same
  // analytic rule as CSP. A zero scatter (single point per class) falls back
  // to the identity so degenerate inputs still give a defined model.
  auto build_cov = [&](const std::vector<Eigen::Index>& rows,
                       const std::vector<int>& row_class) -> Eigen::MatrixXd {
    std::vector<Eigen::MatrixXd> outers;
    outers.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      Eigen::VectorXd z =
          (features.row(rows[i]) - model.means.row(row_class[i])).transpose();
      outers.push_back(z * z.transpose());
    }
    ShrunkCovariance sc = shrunk_mean_covariance(outers);
    if (!(sc.nu > 0)) return Eigen::MatrixXd::Identity(d, d);
    Eigen::LLT<Eigen::MatrixXd> llt(sc.cov);
    if (llt.info() != Eigen::Success)
      fail(Errc::singular, "SingularCovariance: covariance indefinite after shrinkage");
    return sc.cov;
  };

  if (kind == ClassifierKind::Lda) {
    std::vector<Eigen::Index> rows;
    std::vector<int> row_class;
    for (int c = 0; c < k; ++c)
      for (Eigen::Index i : by_class[static_cast<std::size_t>(c)]) {
        rows.push_back(i);
        row_class.push_back(c);
      }
    model.covs.push_back(build_cov(rows, row_class));
  } else {
    for (int c = 0; c < k; ++c) {
      const auto& idx = by_class[static_cast<std::size_t>(c)];
      std::vector<int> row_class(idx.size(), c);
      model.covs.push_back(build_cov(idx, row_class));
    }
  }
  return model;
}

Classification classify(const Eigen::Ref<const Eigen::VectorXd>& feature,
                        const ClassifierModel& model) {
  const int k = static_cast<int>(model.labels.size());
  if (feature.size() != model.means.cols())
    fail(Errc::invalid_argument, "feature dimension " + std::to_string(feature.size()) +
                                     " does not match the model's " +
                                     std::to_string(model.means.cols()));
  Eigen::VectorXd score(k);
  for (int c = 0; c < k; ++c) {
    const Eigen::MatrixXd& cov = model.covs[model.kind == ClassifierKind::Lda
                                                ? 0
                                                : static_cast<std::size_t>(c)];
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
      fail(Errc::singular, "SingularCovariance: stored covariance is not positive definite");
    Eigen::VectorXd diff = feature - model.means.row(c).transpose();
    double maha = diff.dot(llt.solve(diff));
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < cov.rows(); ++i)
      logdet += 2.0 * std::log(llt.matrixL()(i, i));
    score(c) = -0.5 * (maha + logdet) + std::log(model.priors(c));
  }
  Classification out;
  Eigen::Index best = 0;
  score.maxCoeff(&best);
  out.label = model.labels[static_cast<std::size_t>(best)];
  out.posterior = (score.array() - score(best)).exp();
  out.posterior /= out.posterior.sum();
  return out;
}

// ---------------------------------------------------------------------------
// Trial preparation.

dsp::TrialSet prepare_trials(const dsp::TrialSet& trials, const BciConfig& cfg) {
  if (!(cfg.interval_start_s < cfg.interval_end_s))
    fail(Errc::invalid_argument, "analysis interval is empty: start " +
                                     format_double(cfg.interval_start_s) + " end " +
                                     format_double(cfg.interval_end_s));
  if (trials.rate_hz <= 0) fail(Errc::invalid_argument, "trial set has no sample rate");
  const long c0 = std::lround((trials.t_pre_s + cfg.interval_start_s) * trials.rate_hz);
  const long c1 = std::lround((trials.t_pre_s + cfg.interval_end_s) * trials.rate_hz);

  dsp::ButterworthBandpass filter(cfg.filter_order, cfg.band_low_hz, cfg.band_high_hz,
                                  trials.rate_hz);
  dsp::TrialSet out;
  out.rate_hz = trials.rate_hz;
  out.t_pre_s = -cfg.interval_start_s;  // the cut starts after the cue
  out.t_post_s = cfg.interval_end_s;
  out.rejected_events = trials.rejected_events;
  out.epochs.reserve(trials.epochs.size());
  for (const dsp::Epoch& e : trials.epochs) {
    if (c0 < 0 || c1 > e.samples.cols() || c0 >= c1)
      fail(Errc::invalid_argument,
           "analysis interval [" + format_double(cfg.interval_start_s) + ", " +
               format_double(cfg.interval_end_s) + "] s does not fit inside the epoch");
    dsp::Epoch cut;
    cut.trial_id = e.trial_id;
    cut.class_label = e.class_label;
    cut.event_time_ns = e.event_time_ns;
    cut.samples = filter.filtfilt_rows(e.samples).middleCols(c0, c1 - c0);
    out.epochs.push_back(std::move(cut));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation.

std::string CvTable::to_csv() const {
  std::ostringstream os;
  os << "m,train_size,mean_accuracy,sd_accuracy,n_eval\n";
  for (const CvCell& c : cells)
    os << c.m << ',' << c.train_size << ',' << format_double(c.mean_accuracy) << ','
       << format_double(c.sd_accuracy) << ',' << c.n_eval << '\n';
  return os.str();
}

CvTable cross_validate(const dsp::TrialSet& trials, const std::vector<int>& m_values,
                       int folds, int repeats, const CvOptions& opts) {
  if (folds < 2) fail(Errc::invalid_argument, "folds must be >= 2, got " + std::to_string(folds));
  if (repeats < 1) fail(Errc::invalid_argument, "repeats must be >= 1");
  if (m_values.empty()) fail(Errc::invalid_argument, "no m values to evaluate");

  // Canonical per-class trial lists, ordered by trial_id so the fold draw is
  // independent of the order epochs happen to be stored in.
  std::vector<const dsp::Epoch*> ptrs;
  for (const dsp::Epoch& e : trials.epochs) ptrs.push_back(&e);
  ClassSplit split = split_two_classes(ptrs);
  auto by_id = [](const dsp::Epoch* x, const dsp::Epoch* y) { return x->trial_id < y->trial_id; };
  std::sort(split.a.begin(), split.a.end(), by_id);
  std::sort(split.b.begin(), split.b.end(), by_id);

  for (const auto* cls : {&split.a, &split.b}) {
    long count = static_cast<long>(cls->size());
    long largest_fold = (count + folds - 1) / folds;
    if (count < folds || count - largest_fold < 2)
      fail(Errc::insufficient_data,
           "InsufficientTrials: a class has " + std::to_string(count) + " trials, too few for " +
               std::to_string(folds) + "-fold validation");
  }

  std::vector<long> sizes = opts.train_sizes;
  if (sizes.empty()) sizes.push_back(-1);  // sentinel: whole training fold

  // accumulate per (m, size): accuracy per repeat
  std::vector<std::vector<double>> acc(m_values.size() * sizes.size());
  std::vector<long> eval_count(m_values.size() * sizes.size(), 0);
  std::vector<long> train_used(m_values.size() * sizes.size(), 0);

  for (int rep = 0; rep < repeats; ++rep) {
    Rng rng = repeat_rng(opts.seed, static_cast<std::uint64_t>(rep));
    std::vector<const dsp::Epoch*> a = split.a, b = split.b;
    rng.shuffle(a);
    rng.shuffle(b);
    // Deal round-robin so folds stay balanced per class.
    std::vector<std::vector<const dsp::Epoch*>> fold_members(static_cast<std::size_t>(folds));
    for (std::size_t i = 0; i < a.size(); ++i)
      fold_members[i % static_cast<std::size_t>(folds)].push_back(a[i]);
    for (std::size_t i = 0; i < b.size(); ++i)
      fold_members[i % static_cast<std::size_t>(folds)].push_back(b[i]);

    std::vector<long> correct_n(acc.size(), 0), tested_n(acc.size(), 0);

    for (int f = 0; f < folds; ++f) {
      std::vector<const dsp::Epoch*> train_full;
      for (int g = 0; g < folds; ++g)
        if (g != f)
          train_full.insert(train_full.end(), fold_members[static_cast<std::size_t>(g)].begin(),
                            fold_members[static_cast<std::size_t>(g)].end());
      const auto& test = fold_members[static_cast<std::size_t>(f)];

      for (std::size_t si = 0; si < sizes.size(); ++si) {
        // Balanced subsample of the training split when a size is requested.
        std::vector<const dsp::Epoch*> train = train_full;
        if (sizes[si] > 0) {
          std::vector<const dsp::Epoch*> ta, tb;
          for (const dsp::Epoch* e : train_full)
            (e->class_label == split.label_a ? ta : tb).push_back(e);
          long per_class = sizes[si] / 2;
          if (per_class < 2 || per_class > static_cast<long>(std::min(ta.size(), tb.size())))
            fail(Errc::insufficient_data,
                 "InsufficientTrials: cannot draw " + std::to_string(sizes[si]) +
                     " balanced training trials from the folds");
          rng.shuffle(ta);
          rng.shuffle(tb);
          train.assign(ta.begin(), ta.begin() + per_class);
          train.insert(train.end(), tb.begin(), tb.begin() + per_class);
        }

        for (std::size_t mi = 0; mi < m_values.size(); ++mi) {
          std::size_t cell = mi * sizes.size() + si;
          CspModel csp = train_csp_ptrs(train, m_values[mi], {});
          Eigen::MatrixXd feats(static_cast<Eigen::Index>(train.size()), csp.filters.rows());
          std::vector<int> labels;
          labels.reserve(train.size());
          for (std::size_t i = 0; i < train.size(); ++i) {
            feats.row(static_cast<Eigen::Index>(i)) =
                csp_features(train[i]->samples, csp).transpose();
            labels.push_back(train[i]->class_label);
          }
          ClassifierModel clf = train_classifier(feats, labels, opts.kind);
          for (const dsp::Epoch* e : test) {
            Classification c = classify(csp_features(e->samples, csp), clf);
            if (c.label == e->class_label) ++correct_n[cell];
            ++tested_n[cell];
          }
          train_used[cell] += static_cast<long>(train.size());
        }
      }
    }

    for (std::size_t cell = 0; cell < acc.size(); ++cell) {
      acc[cell].push_back(static_cast<double>(correct_n[cell]) /
                          static_cast<double>(tested_n[cell]));
      eval_count[cell] = tested_n[cell];
    }
  }

  CvTable table;
  for (std::size_t mi = 0; mi < m_values.size(); ++mi)
    for (std::size_t si = 0; si < sizes.size(); ++si) {
      std::size_t cell = mi * sizes.size() + si;
      CvCell c;
      c.m = m_values[mi];
      c.train_size = std::lround(static_cast<double>(train_used[cell]) /
                                 static_cast<double>(folds * repeats));
      double mean = std::accumulate(acc[cell].begin(), acc[cell].end(), 0.0) /
                    static_cast<double>(acc[cell].size());
      double var = 0.0;
      for (double v : acc[cell]) var += (v - mean) * (v - mean);
      c.mean_accuracy = mean;
      c.sd_accuracy = acc[cell].size() > 1
                          ? std::sqrt(var / static_cast<double>(acc[cell].size() - 1))
                          : 0.0;
      c.n_eval = eval_count[cell];
      table.cells.push_back(c);
    }
  return table;
}

// ---------------------------------------------------------------------------
// Decoder persistence.

std::string DecoderModel::to_json() const {
  json j;
  j["format"] = "sbs-decoder-v1";
  json c;
  c["m"] = csp.m;
  c["class_a"] = csp.class_a;
  c["class_b"] = csp.class_b;
  c["filters"] = matrix_to_json(csp.filters);
  c["eigvals"] = vector_to_json(csp.eigvals);
  c["cov_a"] = matrix_to_json(csp.cov_a);
  c["cov_b"] = matrix_to_json(csp.cov_b);
  c["band_low_hz"] = csp.band_low_hz;
  c["band_high_hz"] = csp.band_high_hz;
  c["interval_start_s"] = csp.interval_start_s;
  c["interval_end_s"] = csp.interval_end_s;
  j["csp"] = std::move(c);
  json g;
  g["kind"] = classifier.kind == ClassifierKind::Lda ? "lda" : "quadratic";
  g["labels"] = classifier.labels;
  g["means"] = matrix_to_json(classifier.means);
  json covs = json::array();
  for (const Eigen::MatrixXd& m : classifier.covs) covs.push_back(matrix_to_json(m));
  g["covs"] = std::move(covs);
  g["priors"] = vector_to_json(classifier.priors);
  j["classifier"] = std::move(g);
  return j.dump(2);
}

DecoderModel DecoderModel::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(Errc::bad_format, std::string("decoder JSON does not parse: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "sbs-decoder-v1")
      fail(Errc::bad_format, "unknown decoder format " + j.at("format").dump());
    DecoderModel d;
    const json& c = j.at("csp");
    d.csp.m = c.at("m").get<int>();
    d.csp.class_a = c.at("class_a").get<int>();
    d.csp.class_b = c.at("class_b").get<int>();
    d.csp.filters = matrix_from_json(c.at("filters"));
    d.csp.eigvals = vector_from_json(c.at("eigvals"));
    d.csp.cov_a = matrix_from_json(c.at("cov_a"));
    d.csp.cov_b = matrix_from_json(c.at("cov_b"));
    d.csp.band_low_hz = c.at("band_low_hz").get<double>();
    d.csp.band_high_hz = c.at("band_high_hz").get<double>();
    d.csp.interval_start_s = c.at("interval_start_s").get<double>();
    d.csp.interval_end_s = c.at("interval_end_s").get<double>();
    const json& g = j.at("classifier");
    std::string kind = g.at("kind").get<std::string>();
    if (kind != "lda" && kind != "quadratic")
      fail(Errc::bad_format, "unknown classifier kind " + kind);
    d.classifier.kind = kind == "lda" ? ClassifierKind::Lda : ClassifierKind::QuadraticGaussian;
    d.classifier.labels = g.at("labels").get<std::vector<int>>();
    d.classifier.means = matrix_from_json(g.at("means"));
    for (const json& mj : g.at("covs")) d.classifier.covs.push_back(matrix_from_json(mj));
    d.classifier.priors = vector_from_json(g.at("priors"));
    return d;
  } catch (const json::exception& e) {
    fail(Errc::bad_format, std::string("decoder JSON missing fields: ") + e.what());
  }
}

void DecoderModel::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(Errc::io, "cannot open " + path + " for writing");
  f << to_json() << '\n';
  if (!f) fail(Errc::io, "short write to " + path);
}

DecoderModel DecoderModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io, "cannot open " + path);
  std::ostringstream text;
  text << f.rdbuf();
  return from_json(text.str());
}

DecoderModel train_decoder(const dsp::TrialSet& prepared, const BciConfig& cfg) {
  DecoderModel d;
  d.csp = train_csp(prepared, cfg.csp_m, cfg);
  FeatureSet fs = csp_feature_set(prepared, d.csp);
  d.classifier = train_classifier(fs.features, fs.labels, ClassifierKind::Lda);
  return d;
}

Classification predict(const Eigen::Ref<const Eigen::MatrixXd>& epoch,
                       const DecoderModel& model) {
  return classify(csp_features(epoch, model.csp), model.classifier);
}

}  // namespace sbs::bci
