#ifndef SBS_DSP_HPP
#define SBS_DSP_HPP

#include <complex>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"

namespace sbs::dsp {

// ---------------------------------------------------------------------------
// Sliding-window framing: emits a channels x window_len frame every `hop`
// samples once the first window has filled. After n pushed samples the number
// of emitted frames is floor((n - window_len)/hop) + 1 (for n >= window_len).

class FrameBuffer {
 public:
  FrameBuffer(int channels, int window_len, int hop);

  // Push one multichannel sample; returns a completed frame if this sample
  // finishes one.
  std::optional<Eigen::MatrixXd> push(const Eigen::Ref<const Eigen::VectorXd>& sample);

  std::int64_t samples_seen() const { return samples_seen_; }
  std::int64_t emitted_frames() const { return emitted_frames_; }
  int window_len() const { return window_len_; }
  int hop() const { return hop_; }
  int channels() const { return channels_; }
  void reset();

 private:
  int channels_, window_len_, hop_;
  Eigen::MatrixXd ring_;  // channels x window_len, circular by column
  std::int64_t samples_seen_ = 0;
  std::int64_t emitted_frames_ = 0;
};

// ---------------------------------------------------------------------------
// Butterworth bandpass as a cascade of direct-form II transposed biquads.
// `order` counts poles: an order-4 bandpass is built from a 2-pole lowpass
// prototype and runs as two biquads. Design is the bilinear transform with
// frequency prewarping; each biquad keeps the (1 - z^-2) bandpass zeros and
// the cascade is normalized to unit gain at the (warped) center frequency.

class ButterworthBandpass {
 public:
  struct Section {
    double b0, b1, b2;  // numerator: b0 * (1 - z^-2), b1 == 0
    double a1, a2;      // denominator: 1 + a1 z^-1 + a2 z^-2
  };

  // Throws Errc::invalid_argument (InvalidBand) unless
  // 0 < low_hz < high_hz < rate/2 and order is even and >= 2.
  ButterworthBandpass(int order, double low_hz, double high_hz, double rate_hz);

  // Causal single-sample step through the cascade (stateful).
  double step(double x);
  void reset();

  // Causal filtering of a whole signal starting from reset state each call.
  Eigen::VectorXd causal(const Eigen::Ref<const Eigen::VectorXd>& x) const;

  // Zero-phase forward-backward filtering with odd-reflection padding of
  // 3*(order+1) samples per end. Throws Errc::insufficient_data for signals
  // shorter than the padding.
  Eigen::VectorXd filtfilt(const Eigen::Ref<const Eigen::VectorXd>& x) const;

  // Row-wise (per-channel) variants.
  Eigen::MatrixXd causal_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) const;
  Eigen::MatrixXd filtfilt_rows(const Eigen::Ref<const Eigen::MatrixXd>& x) const;

  // Frequency response H(e^{j 2 pi f / rate}) from the coefficients.
  std::complex<double> response(double f_hz) const;
  double magnitude(double f_hz) const { return std::abs(response(f_hz)); }

  // Group delay in samples, -dphi/domega evaluated numerically.
  double group_delay_samples(double f_hz) const;

  int order() const { return order_; }
  double low_hz() const { return low_hz_; }
  double high_hz() const { return high_hz_; }
  double rate_hz() const { return rate_hz_; }
  const std::vector<Section>& sections() const { return sections_; }

 private:
  int order_;
  double low_hz_, high_hz_, rate_hz_;
  std::vector<Section> sections_;
  std::vector<std::array<double, 2>> state_;  // z1, z2 per section

  void run(const double* x, double* y, std::size_t n,
           std::vector<std::array<double, 2>>& state) const;
};

// ---------------------------------------------------------------------------
// Radix-2 FFT (in-house; lengths must be powers of two).

bool is_power_of_two(int n);
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

// Periodic Hann window, w[i] = 0.5 * (1 - cos(2 pi i / n)).
Eigen::VectorXd hann_window(int n);

// ---------------------------------------------------------------------------
// Welch-style power spectra. Bin k holds the one-sided folded power
// sum |X_k|^2 / (N * U) with U = sum w^2, averaged over segments, so the
// total over all bins equals the windowed time-domain power sum(w x)^2 / U
// (Parseval) and, in expectation, the signal variance for white noise.
// Input in microvolts gives bin powers in microvolts squared.

struct PowerSpectrum {
  double rate_hz = 0;
  int nfft = 0;
  std::vector<double> freq_hz;  // nfft/2 + 1 bin centers
  Eigen::MatrixXd power;        // channels x bins
};

// x is channels x samples; segments of nfft samples advance by hop.
// Throws Errc::insufficient_data if fewer than nfft samples,
// Errc::invalid_argument if nfft is not a power of two or hop < 1.
PowerSpectrum welch_power(const Eigen::Ref<const Eigen::MatrixXd>& x, int nfft, int hop,
                           double rate_hz);

// Sum of bin powers with low_hz <= f <= high_hz, per channel.
// Throws Errc::invalid_argument if the band contains no bins.
Eigen::VectorXd band_power(const PowerSpectrum& spectrum, double low_hz, double high_hz);

// ---------------------------------------------------------------------------
// Event-locked epoching.

struct StreamEvent {
  std::int64_t sample_index = 0;  // cue position in the stream
  int class_label = 0;
  std::int64_t stream_time_ns = 0;
};

struct Epoch {
  int trial_id = 0;
  int class_label = 0;
  std::int64_t event_time_ns = 0;
  Eigen::MatrixXd samples;  // channels x epoch_len
};

struct TrialSet {
  double rate_hz = 0;
  double t_pre_s = 0;   // seconds before the event included in each epoch
  double t_post_s = 0;  // seconds after
  std::vector<Epoch> epochs;
  std::vector<int> rejected_events;  // indices into the input event list
};

// Cuts [event - t_pre, event + t_post) around each event; epoch length is
// round((t_pre + t_post) * rate) samples for every epoch. Events whose
// window would leave the stream are skipped and reported in rejected_events.
TrialSet epoch_stream(const Eigen::Ref<const Eigen::MatrixXd>& stream,
                      const std::vector<StreamEvent>& events, double t_pre_s, double t_post_s,
                      double rate_hz);

}  // namespace sbs::dsp

#endif  // SBS_DSP_HPP
