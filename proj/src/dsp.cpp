#include "dsp.hpp"

#include <algorithm>
#include <cmath>

namespace sbs::dsp {

// ---------------------------------------------------------------------------
// FrameBuffer

FrameBuffer::FrameBuffer(int channels, int window_len, int hop)
    : channels_(channels), window_len_(window_len), hop_(hop) {
  if (channels < 1) fail(Errc::invalid_argument, "FrameBuffer: channels must be >= 1");
  if (window_len < 1) fail(Errc::invalid_argument, "FrameBuffer: window_len must be >= 1");
  if (hop < 1) fail(Errc::invalid_argument, "FrameBuffer: hop must be >= 1");
  ring_.setZero(channels, window_len);
}

void FrameBuffer::reset() {
  ring_.setZero();
  samples_seen_ = 0;
  emitted_frames_ = 0;
}

std::optional<Eigen::MatrixXd> FrameBuffer::push(const Eigen::Ref<const Eigen::VectorXd>& sample) {
  if (sample.size() != channels_)
    fail(Errc::invalid_argument, "FrameBuffer: sample has wrong channel count");
  ring_.col(static_cast<int>(samples_seen_ % window_len_)) = sample;
  ++samples_seen_;
  if (samples_seen_ < window_len_) return std::nullopt;
  if ((samples_seen_ - window_len_) % hop_ != 0) return std::nullopt;

  // Unroll the ring into chronological order.
  Eigen::MatrixXd frame(channels_, window_len_);
  int head = static_cast<int>(samples_seen_ % window_len_);  // oldest sample
  for (int i = 0; i < window_len_; ++i)
    frame.col(i) = ring_.col((head + i) % window_len_);
  ++emitted_frames_;
  return frame;
}

// ---------------------------------------------------------------------------
// Butterworth bandpass design

ButterworthBandpass::ButterworthBandpass(int order, double low_hz, double high_hz, double rate_hz)
    : order_(order), low_hz_(low_hz), high_hz_(high_hz), rate_hz_(rate_hz) {
  if (order < 2 || order % 2 != 0)
    fail(Errc::invalid_argument, "InvalidBand: filter order must be even and >= 2");
  if (!(0.0 < low_hz && low_hz < high_hz && high_hz < rate_hz / 2.0))
    fail(Errc::invalid_argument, "InvalidBand: need 0 < low < high < rate/2 (got " +
                                     format_double(low_hz) + ", " + format_double(high_hz) +
                                     " at " + format_double(rate_hz) + " Hz)");

  const int n = order / 2;  // lowpass prototype order
  const double wl = std::tan(M_PI * low_hz / rate_hz);
  const double wh = std::tan(M_PI * high_hz / rate_hz);
  const double w0_sq = wl * wh;
  const double bw = wh - wl;

  // Analog bandpass poles: each prototype pole p spawns the two roots of
  // s^2 - bw*p*s + w0^2 = 0. Conjugate-symmetric roots pair up into real
  // biquads; each section keeps one s=0 and one s=inf zero, which the
  // bilinear transform turns into (1 - z^-2).
  auto add_section = [&](std::complex<double> pole_s) {
    std::complex<double> z = (1.0 + pole_s) / (1.0 - pole_s);  // bilinear, zp = (1+s)/(1-s)
    Section sec;
    sec.b0 = 1.0;  // normalized below
    sec.b1 = 0.0;
    sec.b2 = -1.0;
    sec.a1 = -2.0 * z.real();
    sec.a2 = std::norm(z);
    sections_.push_back(sec);
  };

  for (int k = 1; k <= n; ++k) {
    double theta = M_PI * (2.0 * k + n - 1.0) / (2.0 * n);
    std::complex<double> proto(std::cos(theta), std::sin(theta));
    if (proto.imag() < -1e-12) continue;  // conjugates are implicit
    std::complex<double> disc = std::sqrt(bw * bw * proto * proto - 4.0 * w0_sq);
    std::complex<double> s1 = (bw * proto + disc) / 2.0;
    std::complex<double> s2 = (bw * proto - disc) / 2.0;
    if (std::abs(proto.imag()) <= 1e-12) {
      add_section(s1);  // real prototype pole: s1, s2 are already conjugates
    } else {
      add_section(s1);
      add_section(s2);
    }
  }

  // Unit gain at the warped center frequency, normalized per section.
  const double w_center = 2.0 * std::atan(std::sqrt(w0_sq));
  const std::complex<double> zc = std::polar(1.0, -w_center);
  for (auto& sec : sections_) {
    std::complex<double> h = (sec.b0 + sec.b1 * zc + sec.b2 * zc * zc) /
                             (1.0 + sec.a1 * zc + sec.a2 * zc * zc);
    double g = std::abs(h);
    if (!(g > 0.0) || !std::isfinite(g))
      fail(Errc::runtime, "filter design degenerate at center frequency");
    sec.b0 /= g;
    sec.b2 /= g;
  }
  state_.assign(sections_.size(), {0.0, 0.0});
}

void ButterworthBandpass::reset() {
  for (auto& s : state_) s = {0.0, 0.0};
}

double ButterworthBandpass::step(double x) {
  double y = x;
  for (std::size_t i = 0; i < sections_.size(); ++i) {
    const Section& c = sections_[i];
    auto& z = state_[i];
    double out = c.b0 * y + z[0];
    z[0] = c.b1 * y - c.a1 * out + z[1];
    z[1] = c.b2 * y - c.a2 * out;
    y = out;
  }
  return y;
}

void ButterworthBandpass::run(const double* x, double* y, std::size_t n,
                              std::vector<std::array<double, 2>>& state) const {
  for (std::size_t i = 0; i < n; ++i) {
    double v = x[i];
    for (std::size_t s = 0; s < sections_.size(); ++s) {
      const Section& c = sections_[s];
      auto& z = state[s];
      double out = c.b0 * v + z[0];
      z[0] = c.b1 * v - c.a1 * out + z[1];
      z[1] = c.b2 * v - c.a2 * out;
      v = out;
    }
    y[i] = v;
  }
}

Eigen::VectorXd ButterworthBandpass::causal(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  Eigen::VectorXd y(x.size());
  std::vector<std::array<double, 2>> state(sections_.size(), {0.0, 0.0});
  run(x.data(), y.data(), static_cast<std::size_t>(x.size()), state);
  return y;
}

Eigen::VectorXd ButterworthBandpass::filtfilt(const Eigen::Ref<const Eigen::VectorXd>& x) const {
  const long n = x.size();
  const long pad = 3 * (order_ + 1);
  if (n <= pad)
    fail(Errc::insufficient_data, "filtfilt: signal shorter than reflection padding (" +
                                      std::to_string(n) + " <= " + std::to_string(pad) + ")");

  // Odd reflection about the end samples suppresses edge transients.
  Eigen::VectorXd ext(n + 2 * pad);
  for (long i = 0; i < pad; ++i) ext[i] = 2.0 * x[0] - x[pad - i];
  ext.segment(pad, n) = x;
  for (long i = 0; i < pad; ++i) ext[pad + n + i] = 2.0 * x[n - 1] - x[n - 2 - i];

  // The first section starts in its constant-input steady state (output 0,
  // since every section rejects DC); later sections then see a zero input.
  auto steady_state = [&](double c) {
    std::vector<std::array<double, 2>> st(sections_.size(), {0.0, 0.0});
    st[0] = {-sections_[0].b0 * c, -sections_[0].b0 * c};
    return st;
  };

  Eigen::VectorXd fwd(ext.size());
  auto st = steady_state(ext[0]);
  run(ext.data(), fwd.data(), static_cast<std::size_t>(ext.size()), st);
  fwd.reverseInPlace();
  Eigen::VectorXd back(ext.size());
  st = steady_state(fwd[0]);
  run(fwd.data(), back.data(), static_cast<std::size_t>(ext.size()), st);
  back.reverseInPlace();
  return back.segment(pad, n);
}

Eigen::MatrixXd ButterworthBandpass::causal_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  Eigen::MatrixXd y(x.rows(), x.cols());
  for (long r = 0; r < x.rows(); ++r) y.row(r) = causal(x.row(r).transpose()).transpose();
  return y;
}

Eigen::MatrixXd ButterworthBandpass::filtfilt_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
  Eigen::MatrixXd y(x.rows(), x.cols());
  for (long r = 0; r < x.rows(); ++r) y.row(r) = filtfilt(x.row(r).transpose()).transpose();
  return y;
}

std::complex<double> ButterworthBandpass::response(double f_hz) const {
  const std::complex<double> zi = std::polar(1.0, -2.0 * M_PI * f_hz / rate_hz_);
  const std::complex<double> zi2 = zi * zi;
  std::complex<double> h = 1.0;
  for (const auto& c : sections_)
    h *= (c.b0 + c.b1 * zi + c.b2 * zi2) / (1.0 + c.a1 * zi + c.a2 * zi2);
  return h;
}

double ButterworthBandpass::group_delay_samples(double f_hz) const {
  // -dphi/domega, summed per section so no unwrapping is needed.
  const double dw = 1e-6;
  const double w = 2.0 * M_PI * f_hz / rate_hz_;
  double total = 0.0;
  for (const auto& c : sections_) {
    auto phase_at = [&](double omega) {
      std::complex<double> zi = std::polar(1.0, -omega);
      std::complex<double> h = (c.b0 + c.b1 * zi + c.b2 * zi * zi) /
                               (1.0 + c.a1 * zi + c.a2 * zi * zi);
      return std::arg(h);
    };
    double d = phase_at(w + dw) - phase_at(w - dw);
    if (d > M_PI) d -= 2.0 * M_PI;  // crossed the +-pi cut
    if (d < -M_PI) d += 2.0 * M_PI;
    total += -d / (2.0 * dw);
  }
  return total;
}

// ---------------------------------------------------------------------------
// FFT

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  if (!is_power_of_two(static_cast<int>(n)))
    fail(Errc::invalid_argument, "fft length must be a power of two");

  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    std::complex<double> wroot = std::polar(1.0, ang);
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w = 1.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wroot;
      }
    }
  }
  if (inverse)
    for (auto& v : a) v /= static_cast<double>(n);
}

Eigen::VectorXd hann_window(int n) {
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i)
    w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / static_cast<double>(n)));
  return w;
}

// ---------------------------------------------------------------------------
// Welch power spectra

PowerSpectrum welch_power(const Eigen::Ref<const Eigen::MatrixXd>& x, int nfft, int hop,
                          double rate_hz) {
  if (!is_power_of_two(nfft)) fail(Errc::invalid_argument, "welch: nfft must be a power of two");
  if (hop < 1) fail(Errc::invalid_argument, "welch: hop must be >= 1");
  const long n = x.cols();
  if (n < nfft)
    fail(Errc::insufficient_data, "welch: need at least nfft samples (" + std::to_string(n) +
                                      " < " + std::to_string(nfft) + ")");

  const Eigen::VectorXd w = hann_window(nfft);
  const double u = w.squaredNorm();  // sum of w^2
  const int bins = nfft / 2 + 1;

  PowerSpectrum out;
  out.rate_hz = rate_hz;
  out.nfft = nfft;
  out.freq_hz.resize(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k)
    out.freq_hz[static_cast<std::size_t>(k)] = rate_hz * k / static_cast<double>(nfft);
  out.power.setZero(x.rows(), bins);

  int segments = 0;
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(nfft));
  for (long start = 0; start + nfft <= n; start += hop, ++segments) {
    for (long ch = 0; ch < x.rows(); ++ch) {
      for (int i = 0; i < nfft; ++i)
        buf[static_cast<std::size_t>(i)] = {x(ch, start + i) * w[i], 0.0};
      fft_inplace(buf, false);
      // one-sided fold: double everything except DC and Nyquist
      for (int k = 0; k < bins; ++k) {
        double p = std::norm(buf[static_cast<std::size_t>(k)]) / (nfft * u);
        if (k != 0 && k != nfft / 2) p *= 2.0;
        out.power(ch, k) += p;
      }
    }
  }
  out.power /= static_cast<double>(segments);
  return out;
}

Eigen::VectorXd band_power(const PowerSpectrum& spectrum, double low_hz, double high_hz) {
  if (!(low_hz <= high_hz)) fail(Errc::invalid_argument, "band_power: low > high");
  Eigen::VectorXd total = Eigen::VectorXd::Zero(spectrum.power.rows());
  int hits = 0;
  for (std::size_t k = 0; k < spectrum.freq_hz.size(); ++k) {
    double f = spectrum.freq_hz[k];
    if (f >= low_hz && f <= high_hz) {
      total += spectrum.power.col(static_cast<long>(k));
      ++hits;
    }
  }
  if (hits == 0)
    fail(Errc::invalid_argument, "band_power: no spectral bins inside [" +
                                     format_double(low_hz) + ", " + format_double(high_hz) + "] Hz");
  return total;
}

// ---------------------------------------------------------------------------
// Epoching

TrialSet epoch_stream(const Eigen::Ref<const Eigen::MatrixXd>& stream,
                      const std::vector<StreamEvent>& events, double t_pre_s, double t_post_s,
                      double rate_hz) {
  if (rate_hz <= 0) fail(Errc::invalid_argument, "epoch_stream: rate must be positive");
  if (t_pre_s < 0 || t_post_s <= 0)
    fail(Errc::invalid_argument, "epoch_stream: need t_pre >= 0 and t_post > 0");
  const long pre = std::lround(t_pre_s * rate_hz);
  const long len = std::lround((t_pre_s + t_post_s) * rate_hz);

  TrialSet set;
  set.rate_hz = rate_hz;
  set.t_pre_s = t_pre_s;
  set.t_post_s = t_post_s;
  int trial_id = 0;
  for (std::size_t e = 0; e < events.size(); ++e) {
    long start = static_cast<long>(events[e].sample_index) - pre;
    if (start < 0 || start + len > stream.cols()) {
      set.rejected_events.push_back(static_cast<int>(e));
      SBS_LOG_DEBUG("epoch_stream: event " + std::to_string(e) + " too close to stream edge");
      continue;
    }
    Epoch ep;
    ep.trial_id = trial_id++;
    ep.class_label = events[e].class_label;
    ep.event_time_ns = events[e].stream_time_ns;
    ep.samples = stream.middleCols(start, len);
    set.epochs.push_back(std::move(ep));
  }
  return set;
}

}  // namespace sbs::dsp
