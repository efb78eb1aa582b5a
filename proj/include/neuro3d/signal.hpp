#pragma once

// EEG preprocessing: epoching with baseline correction, polyphase resampling,
// zero-phase band-pass and notch filtering, multivariate noise normalization
// and repetition averaging.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace neuro3d::signal {

enum class StimulusKind : std::uint8_t { Static = 0, Dynamic = 1 };

inline const char* to_string(StimulusKind k) { return k == StimulusKind::Static ? "static" : "dynamic"; }

struct TrialLabel {
  int stimulus_id = 0;
  int object_class = 0;
  int color_class = 0;
  int subject_id = 0;
  int repetition = 0;  // -1 once repetitions have been averaged

  bool operator==(const TrialLabel&) const = default;
};

/// trials × channels × samples, row-major, float32.
struct EpochSet {
  StimulusKind kind = StimulusKind::Static;
  double rate = 250.0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<TrialLabel> labels;
  std::vector<float> data;

  std::size_t trials() const { return labels.size(); }
  std::size_t trial_size() const { return channels * samples; }

  std::span<float> trial(std::size_t i) { return {data.data() + i * trial_size(), trial_size()}; }
  std::span<const float> trial(std::size_t i) const { return {data.data() + i * trial_size(), trial_size()}; }
  float& at(std::size_t t, std::size_t c, std::size_t s) { return data[(t * channels + c) * samples + s]; }
  float at(std::size_t t, std::size_t c, std::size_t s) const { return data[(t * channels + c) * samples + s]; }

  /// Throws if the buffer does not match the declared shape.
  void validate() const {
    if (data.size() != trials() * trial_size()) throw std::invalid_argument("EpochSet: data size does not match shape");
    if (rate <= 0) throw std::invalid_argument("EpochSet: rate must be positive");
  }

  static EpochSet empty_like(const EpochSet& other, std::size_t samples) {
    EpochSet e;
    e.kind = other.kind;
    e.rate = other.rate;
    e.channels = other.channels;
    e.samples = samples;
    e.labels = other.labels;
    e.data.assign(e.trials() * e.trial_size(), 0.0f);
    return e;
  }

  bool operator==(const EpochSet&) const = default;
};

struct Event {
  std::size_t sample = 0;
  int stimulus_id = 0;
  StimulusKind kind = StimulusKind::Static;
  int object_class = 0;
  int color_class = 0;
};

/// Continuous multi-channel recording, channels × samples in microvolts.
struct RawRecording {
  double rate = 1000.0;
  int subject_id = 0;
  std::size_t channels = 0;
  std::size_t samples = 0;
  std::vector<float> data;
  std::vector<Event> events;

  float at(std::size_t c, std::size_t s) const { return data[c * samples + s]; }
  float& at(std::size_t c, std::size_t s) { return data[c * samples + s]; }

  void validate() const {
    if (rate <= 0) throw std::invalid_argument("RawRecording: sample_rate must be positive");
    if (channels == 0) throw std::invalid_argument("RawRecording: no channels");
    if (data.size() != channels * samples) throw std::invalid_argument("RawRecording: data size does not match shape");
    for (const auto& e : events) {
      if (e.sample >= samples) throw std::invalid_argument("RawRecording: event index outside recording");
    }
  }
};

struct PreprocessConfig {
  double band_lo = 0.1;
  double band_hi = 100.0;
  double notch = 50.0;
  double notch_q = 30.0;
  double target_rate = 250.0;
  double baseline_window = 0.2;  // seconds before onset
  double shrinkage = 0.1;
  double static_seconds = 1.0;
  double dynamic_seconds = 6.0;

  void validate() const {
    if (!(band_lo > 0 && band_lo < band_hi)) throw std::invalid_argument("PreprocessConfig: need 0 < band_lo < band_hi");
    if (!(notch > band_lo && notch < band_hi)) throw std::invalid_argument("PreprocessConfig: notch must lie inside the pass band");
    if (target_rate <= 0) throw std::invalid_argument("PreprocessConfig: target_rate must be positive");
    if (baseline_window < 0) throw std::invalid_argument("PreprocessConfig: baseline_window must be non-negative");
    if (shrinkage < 0 || shrinkage > 1) throw std::invalid_argument("PreprocessConfig: shrinkage must be in [0, 1]");
    if (static_seconds <= 0 || dynamic_seconds <= 0) throw std::invalid_argument("PreprocessConfig: epoch lengths must be positive");
  }
};

// ---------------------------------------------------------------------------
// Epoching

struct RejectedEvent {
  std::size_t event_index = 0;
  std::size_t sample = 0;
  int stimulus_id = 0;
  std::string reason;
};

struct SegmentResult {
  EpochSet epochs;
  std::vector<RejectedEvent> rejected;
};

inline std::size_t epoch_length(StimulusKind kind, double rate, const PreprocessConfig& cfg) {
  const double seconds = kind == StimulusKind::Static ? cfg.static_seconds : cfg.dynamic_seconds;
  return static_cast<std::size_t>(std::llround(seconds * rate));
}

/// Cuts one baseline-corrected epoch per event of the requested kind.
/// Events whose window (including the pre-stimulus baseline) leaves the
/// recording are rejected and reported, never truncated.
inline SegmentResult segment_epochs(const RawRecording& rec, const PreprocessConfig& cfg, StimulusKind kind) {
  rec.validate();
  for (std::size_t i = 1; i < rec.events.size(); ++i) {
    if (rec.events[i].sample < rec.events[i - 1].sample) throw std::invalid_argument("segment_epochs: events must be sorted by sample index");
  }
  const std::size_t length = epoch_length(kind, rec.rate, cfg);
  const std::size_t baseline = static_cast<std::size_t>(std::llround(cfg.baseline_window * rec.rate));

  SegmentResult out;
  out.epochs.kind = kind;
  out.epochs.rate = rec.rate;
  out.epochs.channels = rec.channels;
  out.epochs.samples = length;

  std::map<int, int> seen;  // stimulus id -> repetitions so far
  for (std::size_t i = 0; i < rec.events.size(); ++i) {
    const Event& ev = rec.events[i];
    if (ev.kind != kind) continue;
    if (ev.sample < baseline) {
      out.rejected.push_back({i, ev.sample, ev.stimulus_id, "baseline window starts before recording"});
      continue;
    }
    if (ev.sample + length > rec.samples) {
      out.rejected.push_back({i, ev.sample, ev.stimulus_id, "epoch window exceeds recording end"});
      continue;
    }
    const int rep = seen[ev.stimulus_id]++;
    out.epochs.labels.push_back({ev.stimulus_id, ev.object_class, ev.color_class, rec.subject_id, rep});
    const std::size_t base = out.epochs.data.size();
    out.epochs.data.resize(base + rec.channels * length);
    for (std::size_t c = 0; c < rec.channels; ++c) {
      double mean = 0;
      if (baseline > 0) {
        for (std::size_t s = ev.sample - baseline; s < ev.sample; ++s) mean += rec.at(c, s);
        mean /= static_cast<double>(baseline);
      }
      float* dst = out.epochs.data.data() + base + c * length;
      for (std::size_t s = 0; s < length; ++s) dst[s] = static_cast<float>(rec.at(c, ev.sample + s) - mean);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {

inline double bessel_i0(double x) {
  double sum = 1, term = 1;
  const double q = x * x / 4;
  for (int k = 1; k < 64; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

inline double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double px = std::numbers::pi * x;
  return std::sin(px) / px;
}

// Odd (point-symmetric) extension about the end samples.
inline double extended(std::span<const double> x, long long j) {
  const long long n = static_cast<long long>(x.size());
  if (j < 0) {
    const long long m = std::min(-j, n - 1);
    return 2 * x[0] - x[static_cast<std::size_t>(m)];
  }
  if (j >= n) {
    const long long m = std::min(j - (n - 1), n - 1);
    return 2 * x[static_cast<std::size_t>(n - 1)] - x[static_cast<std::size_t>(n - 1 - m)];
  }
  return x[static_cast<std::size_t>(j)];
}

}  // namespace detail

/// Rational polyphase resampler with a Kaiser-windowed sinc kernel.
class Resampler {
 public:
  static constexpr int kZeroCrossings = 16;
  static constexpr double kKaiserBeta = 8.0;

  Resampler(double source_rate, double target_rate) {
    if (target_rate <= 0 || source_rate <= 0) throw std::invalid_argument("resample: rates must be positive");
    const long long src = std::llround(source_rate);
    const long long dst = std::llround(target_rate);
    if (std::abs(static_cast<double>(src) - source_rate) > 1e-9 || std::abs(static_cast<double>(dst) - target_rate) > 1e-9) {
      throw std::invalid_argument("resample: rates must be whole numbers of Hz");
    }
    const long long g = std::gcd(src, dst);
    up_ = dst / g;
    down_ = src / g;
    // Cutoff relative to the input Nyquist.
    const double fc = std::min(1.0, static_cast<double>(up_) / static_cast<double>(down_));
    half_taps_ = static_cast<int>(std::ceil(kZeroCrossings / fc));
    const double norm = detail::bessel_i0(kKaiserBeta);
    phases_.resize(static_cast<std::size_t>(up_));
    for (long long p = 0; p < up_; ++p) {
      const double frac = static_cast<double>(p) / static_cast<double>(up_);
      auto& taps = phases_[static_cast<std::size_t>(p)];
      taps.resize(static_cast<std::size_t>(2 * half_taps_ + 1));
      double total = 0;
      for (int k = -half_taps_; k <= half_taps_; ++k) {
        const double tau = frac - static_cast<double>(k);  // t - j with j = base + k
        const double r = tau / (half_taps_ + 1.0);
        const double w = std::abs(r) >= 1 ? 0.0 : detail::bessel_i0(kKaiserBeta * std::sqrt(1 - r * r)) / norm;
        const double h = fc * detail::sinc(fc * tau) * w;
        taps[static_cast<std::size_t>(k + half_taps_)] = h;
        total += h;
      }
      for (double& h : taps) h /= total;  // unit DC gain per phase
    }
  }

  std::size_t output_length(std::size_t n) const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(n) * static_cast<double>(up_) / static_cast<double>(down_)));
  }

  std::vector<double> operator()(std::span<const double> x) const {
    const std::size_t n_out = output_length(x.size());
    std::vector<double> y(n_out, 0.0);
    if (x.empty()) return y;
    for (std::size_t n = 0; n < n_out; ++n) {
      const long long num = static_cast<long long>(n) * down_;
      const long long base = num / up_;
      const auto& taps = phases_[static_cast<std::size_t>(num % up_)];
      double acc = 0;
      for (int k = -half_taps_; k <= half_taps_; ++k) {
        acc += taps[static_cast<std::size_t>(k + half_taps_)] * detail::extended(x, base + k);
      }
      y[n] = acc;
    }
    return y;
  }

 private:
  long long up_ = 1;
  long long down_ = 1;
  int half_taps_ = 0;
  std::vector<std::vector<double>> phases_;
};

inline EpochSet resample(const EpochSet& x, double target_rate) {
  if (target_rate <= 0) throw std::invalid_argument("resample: target_rate must be positive");
  x.validate();
  const Resampler rs(x.rate, target_rate);
  EpochSet out = EpochSet::empty_like(x, rs.output_length(x.samples));
  out.rate = target_rate;
  std::vector<double> buf(x.samples);
  for (std::size_t t = 0; t < x.trials(); ++t) {
    for (std::size_t c = 0; c < x.channels; ++c) {
      for (std::size_t s = 0; s < x.samples; ++s) buf[s] = x.at(t, c, s);
      const auto y = rs(buf);
      for (std::size_t s = 0; s < out.samples; ++s) out.at(t, c, s) = static_cast<float>(y[s]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// IIR filtering

/// Second-order section, normalized so a0 = 1. Direct form II transposed.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;

  bool stable() const { return std::isfinite(b0 + b1 + b2 + a1 + a2) && std::abs(a2) < 1.0 && std::abs(a1) < 1.0 + a2; }
  double dc_gain() const { return (b0 + b1 + b2) / (1.0 + a1 + a2); }

  static Biquad from_raw(double b0, double b1, double b2, double a0, double a1, double a2) {
    return {b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0};
  }
};

class FilterDesignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_cutoff(double f, double rate, const char* what) {
  if (!(f > 0) || !(f < rate / 2)) {
    throw FilterDesignError(std::string(what) + " cutoff " + std::to_string(f) + " Hz must lie in (0, " + std::to_string(rate / 2) + ") Hz");
  }
}

}  // namespace detail

/// Second-order Butterworth sections via the bilinear transform.
inline Biquad butterworth_lowpass(double f, double rate) {
  detail::check_cutoff(f, rate, "low-pass");
  const double w0 = 2 * std::numbers::pi * f / rate;
  const double alpha = std::sin(w0) / (2 * std::numbers::sqrt2 / 2);
  const double c = std::cos(w0);
  return Biquad::from_raw((1 - c) / 2, 1 - c, (1 - c) / 2, 1 + alpha, -2 * c, 1 - alpha);
}

inline Biquad butterworth_highpass(double f, double rate) {
  detail::check_cutoff(f, rate, "high-pass");
  const double w0 = 2 * std::numbers::pi * f / rate;
  const double alpha = std::sin(w0) / (2 * std::numbers::sqrt2 / 2);
  const double c = std::cos(w0);
  return Biquad::from_raw((1 + c) / 2, -(1 + c), (1 + c) / 2, 1 + alpha, -2 * c, 1 - alpha);
}

inline Biquad notch_section(double f, double q, double rate) {
  detail::check_cutoff(f, rate, "notch");
  if (!(q > 0)) throw FilterDesignError("notch quality factor must be positive");
  const double w0 = 2 * std::numbers::pi * f / rate;
  const double alpha = std::sin(w0) / (2 * q);
  const double c = std::cos(w0);
  return Biquad::from_raw(1, -2 * c, 1, 1 + alpha, -2 * c, 1 - alpha);
}

/// Fourth-order band-pass: a 2nd-order high-pass at lo cascaded with a
/// 2nd-order low-pass at hi.
inline std::vector<Biquad> design_bandpass(double lo, double hi, double rate) {
  if (!(lo < hi)) throw FilterDesignError("band-pass requires lo < hi");
  return {butterworth_highpass(lo, rate), butterworth_lowpass(hi, rate)};
}

inline std::vector<Biquad> design_notch(double f, double q, double rate) { return {notch_section(f, q, rate)}; }

/// One causal pass over x, starting each section in its steady state for a
/// constant input equal to the first sample.
inline void sosfilt_inplace(std::span<const Biquad> sections, std::vector<double>& x) {
  for (const Biquad& s : sections) {
    if (x.empty()) return;
    const double x0 = x[0];
    const double g = s.dc_gain();
    double z1 = (g - s.b0) * x0;
    double z2 = (s.b2 - s.a2 * g) * x0;
    for (double& v : x) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
}

/// Forward-backward (zero-phase) filtering with odd-extension padding.
inline std::vector<double> sosfiltfilt(std::span<const Biquad> sections, std::span<const double> x) {
  for (const Biquad& s : sections) {
    if (!s.stable()) throw FilterDesignError("unstable filter coefficients");
  }
  const std::size_t n = x.size();
  if (n == 0) return {};
  const std::size_t pad = std::min<std::size_t>(n - 1, 3 * (2 * sections.size() + 1));
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2 * x[n - 1] - x[n - 1 - i]);
  sosfilt_inplace(sections, ext);
  std::reverse(ext.begin(), ext.end());
  sosfilt_inplace(sections, ext);
  std::reverse(ext.begin(), ext.end());
  std::vector<double> y(ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n));
  for (double v : y) {
    if (!std::isfinite(v)) throw FilterDesignError("filter produced non-finite output");
  }
  return y;
}

inline EpochSet apply_zero_phase(const EpochSet& x, std::span<const Biquad> sections) {
  x.validate();
  EpochSet out = x;
  std::vector<double> buf(x.samples);
  for (std::size_t t = 0; t < x.trials(); ++t) {
    for (std::size_t c = 0; c < x.channels; ++c) {
      for (std::size_t s = 0; s < x.samples; ++s) buf[s] = x.at(t, c, s);
      const auto y = sosfiltfilt(sections, buf);
      for (std::size_t s = 0; s < x.samples; ++s) out.at(t, c, s) = static_cast<float>(y[s]);
    }
  }
  return out;
}

inline EpochSet bandpass_filter(const EpochSet& x, double lo, double hi) {
  const auto sos = design_bandpass(lo, hi, x.rate);
  return apply_zero_phase(x, sos);
}

inline EpochSet notch_filter(const EpochSet& x, double freq, double q = 30.0) {
  const auto sos = design_notch(freq, q, x.rate);
  return apply_zero_phase(x, sos);
}

// ---------------------------------------------------------------------------
// Multivariate noise normalization

class SingularCovarianceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Channel noise covariance: residuals around each condition's (stimulus')
/// mean time course, normalized by (repetitions - 1) * samples, averaged
/// over conditions with at least two trials. When no condition repeats, the
/// whole set is treated as a single condition.
inline Eigen::MatrixXd noise_covariance(const EpochSet& x) {
  x.validate();
  if (x.trials() < 2) throw std::invalid_argument("noise_normalize: need at least two trials");
  std::map<int, std::vector<std::size_t>> conditions;
  for (std::size_t t = 0; t < x.trials(); ++t) conditions[x.labels[t].stimulus_id].push_back(t);
  bool any_repeated = false;
  for (const auto& [id, members] : conditions) any_repeated = any_repeated || members.size() >= 2;
  if (!any_repeated) {
    conditions.clear();
    for (std::size_t t = 0; t < x.trials(); ++t) conditions[0].push_back(t);
  }
  const auto C = static_cast<Eigen::Index>(x.channels);
  const auto S = static_cast<Eigen::Index>(x.samples);
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(C, C);
  int used = 0;
  for (const auto& [id, members] : conditions) {
    if (members.size() < 2) continue;
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(C, S);
    for (std::size_t t : members) {
      mean += Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(x.trial(t).data(), C, S).cast<double>();
    }
    mean /= static_cast<double>(members.size());
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(C, C);
    for (std::size_t t : members) {
      Eigen::MatrixXd r =
          Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(x.trial(t).data(), C, S).cast<double>() - mean;
      acc.noalias() += r * r.transpose();
    }
    total += acc / (static_cast<double>(members.size() - 1) * static_cast<double>(S));
    ++used;
  }
  return total / static_cast<double>(used);
}

/// Symmetric inverse square root of the shrinkage-regularized covariance.
inline Eigen::MatrixXd whitening_matrix(const Eigen::MatrixXd& cov, double shrinkage) {
  if (shrinkage < 0 || shrinkage > 1) throw std::invalid_argument("noise_normalize: shrinkage must be in [0, 1]");
  const auto C = cov.rows();
  const double mu = cov.trace() / static_cast<double>(C);
  Eigen::MatrixXd reg = (1 - shrinkage) * cov + shrinkage * mu * Eigen::MatrixXd::Identity(C, C);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(reg);
  const auto& ev = eig.eigenvalues();
  if (!(ev.maxCoeff() > 0) || ev.minCoeff() <= 1e-12 * ev.maxCoeff()) {
    throw SingularCovarianceError("noise covariance is singular; use a nonzero shrinkage to regularize it");
  }
  return eig.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
}

inline EpochSet apply_channel_transform(const EpochSet& x, const Eigen::MatrixXd& w) {
  const auto C = static_cast<Eigen::Index>(x.channels);
  const auto S = static_cast<Eigen::Index>(x.samples);
  if (w.rows() != C || w.cols() != C) throw std::invalid_argument("channel transform shape mismatch");
  EpochSet out = x;
  for (std::size_t t = 0; t < x.trials(); ++t) {
    Eigen::MatrixXd v =
        Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(x.trial(t).data(), C, S).cast<double>();
    Eigen::MatrixXd y = w * v;
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.trial(t).data(), C, S) = y.cast<float>();
  }
  return out;
}

inline EpochSet noise_normalize(const EpochSet& x, double shrinkage) {
  return apply_channel_transform(x, whitening_matrix(noise_covariance(x), shrinkage));
}

// ---------------------------------------------------------------------------
// Repetition handling

enum class SplitMode { Train, Test };

/// Train: repetitions stay independent samples. Test: each stimulus is
/// replaced by the mean of its `expected` repetitions, in order of first
/// appearance.
inline EpochSet average_repetitions(const EpochSet& x, SplitMode mode, int expected = 4) {
  x.validate();
  if (mode == SplitMode::Train) return x;
  std::vector<int> order;
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t t = 0; t < x.trials(); ++t) {
    const int id = x.labels[t].stimulus_id;
    if (!groups.count(id)) order.push_back(id);
    groups[id].push_back(t);
  }
  EpochSet out;
  out.kind = x.kind;
  out.rate = x.rate;
  out.channels = x.channels;
  out.samples = x.samples;
  out.data.assign(order.size() * x.trial_size(), 0.0f);
  std::vector<double> acc(x.trial_size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& members = groups[order[i]];
    if (static_cast<int>(members.size()) != expected) {
      throw std::invalid_argument("average_repetitions: stimulus " + std::to_string(order[i]) + " has " +
                                  std::to_string(members.size()) + " repetitions, expected " + std::to_string(expected));
    }
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t : members) {
      auto tr = x.trial(t);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += tr[j];
    }
    float* dst = out.data.data() + i * x.trial_size();
    for (std::size_t j = 0; j < acc.size(); ++j) dst[j] = static_cast<float>(acc[j] / static_cast<double>(members.size()));
    TrialLabel l = x.labels[members.front()];
    l.repetition = -1;
    out.labels.push_back(l);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct PreprocessResult {
  EpochSet static_epochs;
  EpochSet dynamic_epochs;
  std::vector<RejectedEvent> rejected;
};

/// segment -> baseline -> resample -> band-pass -> notch -> whiten, per kind.
inline EpochSet preprocess_kind(const RawRecording& rec, const PreprocessConfig& cfg, StimulusKind kind,
                                std::vector<RejectedEvent>* rejected) {
  auto seg = segment_epochs(rec, cfg, kind);
  if (rejected) rejected->insert(rejected->end(), seg.rejected.begin(), seg.rejected.end());
  EpochSet e = std::move(seg.epochs);
  if (e.trials() == 0) return e;
  e = resample(e, cfg.target_rate);
  e = bandpass_filter(e, cfg.band_lo, cfg.band_hi);
  e = notch_filter(e, cfg.notch, cfg.notch_q);
  if (e.trials() >= 2) e = noise_normalize(e, cfg.shrinkage);
  return e;
}

inline PreprocessResult preprocess(const RawRecording& rec, const PreprocessConfig& cfg) {
  cfg.validate();
  PreprocessResult r;
  r.static_epochs = preprocess_kind(rec, cfg, StimulusKind::Static, &r.rejected);
  r.dynamic_epochs = preprocess_kind(rec, cfg, StimulusKind::Dynamic, &r.rejected);
  std::sort(r.rejected.begin(), r.rejected.end(), [](const auto& a, const auto& b) { return a.event_index < b.event_index; });
  return r;
}

}  // namespace neuro3d::signal
