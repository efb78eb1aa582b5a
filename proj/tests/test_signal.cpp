#include "neuro3d/random.hpp"
#include "neuro3d/signal.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

namespace {

using namespace neuro3d::signal;
using neuro3d::RandomStream;

constexpr double kPi = std::numbers::pi;

EpochSet single_channel(const std::vector<double>& x, double rate) {
  EpochSet e;
  e.rate = rate;
  e.channels = 1;
  e.samples = x.size();
  e.labels = {{0, 0, 0, 0, 0}};
  for (double v : x) e.data.push_back(static_cast<float>(v));
  return e;
}

std::vector<double> sine(double freq, double rate, std::size_t n, double amp = 1.0, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2 * kPi * freq * static_cast<double>(i) / rate + phase);
  return x;
}

// Least-squares amplitude of a known-frequency sinusoid over [from, to).
double fitted_amplitude(const EpochSet& e, double freq, std::size_t from, std::size_t to) {
  double ss = 0, cc = 0, sc = 0, ys = 0, yc = 0;
  for (std::size_t i = from; i < to; ++i) {
    const double t = static_cast<double>(i) / e.rate;
    const double s = std::sin(2 * kPi * freq * t), c = std::cos(2 * kPi * freq * t);
    const double y = e.at(0, 0, i);
    ss += s * s; cc += c * c; sc += s * c; ys += y * s; yc += y * c;
  }
  const double det = ss * cc - sc * sc;
  const double a = (ys * cc - yc * sc) / det;
  const double b = (yc * ss - ys * sc) / det;
  return std::hypot(a, b);
}

// Oracle: |H(f)| of one causal pass, from the DFT of a long impulse response.
double response_magnitude(const std::vector<Biquad>& sos, double freq, double rate, std::size_t n = 1 << 18) {
  std::vector<double> h(n, 0.0);
  h[0] = 1.0;
  // Direct form I from rest, independent of the library's filtering routine.
  for (const Biquad& s : sos) {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (double& v : h) {
      const double y = s.b0 * v + s.b1 * x1 + s.b2 * x2 - s.a1 * y1 - s.a2 * y2;
      x2 = x1; x1 = v; y2 = y1; y1 = y;
      v = y;
    }
  }
  std::complex<double> acc = 0;
  for (std::size_t k = 0; k < n; ++k) acc += h[k] * std::polar(1.0, -2 * kPi * freq * static_cast<double>(k) / rate);
  return std::abs(acc);
}

RawRecording make_recording(std::size_t channels, std::size_t samples, double rate) {
  RawRecording r;
  r.rate = rate;
  r.channels = channels;
  r.samples = samples;
  r.data.assign(channels * samples, 0.0f);
  return r;
}

// --- segment_epochs ------------------------------------------------------

TEST(SegmentEpochs, StaticEpochCoversOneSecondAtSource) {
  auto rec = make_recording(2, 20000, 1000.0);
  for (std::size_t s = 0; s < rec.samples; ++s) rec.at(0, s) = static_cast<float>(s);
  rec.events = {{10000, 7, StimulusKind::Static, 3, 1}};
  PreprocessConfig cfg;
  cfg.baseline_window = 0.0;
  auto r = segment_epochs(rec, cfg, StimulusKind::Static);
  ASSERT_EQ(r.epochs.trials(), 1u);
  EXPECT_EQ(r.epochs.samples, 1000u);
  EXPECT_FLOAT_EQ(r.epochs.at(0, 0, 0), 10000.0f);
  EXPECT_FLOAT_EQ(r.epochs.at(0, 0, 999), 10999.0f);
  EXPECT_EQ(r.epochs.labels[0].object_class, 3);
  EXPECT_EQ(r.epochs.labels[0].color_class, 1);
}

TEST(SegmentEpochs, ConstantChannelIsZeroAfterBaseline) {
  auto rec = make_recording(3, 5000, 1000.0);
  std::fill(rec.data.begin(), rec.data.end(), 5.0f);
  rec.events = {{1000, 1, StimulusKind::Static, 0, 0}};
  auto r = segment_epochs(rec, PreprocessConfig{}, StimulusKind::Static);
  ASSERT_EQ(r.epochs.trials(), 1u);
  for (float v : r.epochs.data) EXPECT_EQ(v, 0.0f);
}

TEST(SegmentEpochs, DynamicEpochIs1500SamplesAfterResampling) {
  auto rec = make_recording(2, 9000, 1000.0);
  rec.events = {{1000, 1, StimulusKind::Dynamic, 0, 0}};
  auto r = segment_epochs(rec, PreprocessConfig{}, StimulusKind::Dynamic);
  ASSERT_EQ(r.epochs.samples, 6000u);
  EXPECT_EQ(resample(r.epochs, 250.0).samples, 1500u);
}

TEST(SegmentEpochs, OutOfBoundsEventsAreRejectedWithReport) {
  auto rec = make_recording(1, 3000, 1000.0);
  rec.events = {{100, 1, StimulusKind::Static, 0, 0},    // baseline needs 200 samples
                {1000, 2, StimulusKind::Static, 0, 0},   // fits
                {2500, 3, StimulusKind::Static, 0, 0}};  // runs past the end
  auto r = segment_epochs(rec, PreprocessConfig{}, StimulusKind::Static);
  EXPECT_EQ(r.epochs.trials(), 1u);
  EXPECT_EQ(r.epochs.labels[0].stimulus_id, 2);
  ASSERT_EQ(r.rejected.size(), 2u);
  EXPECT_EQ(r.rejected[0].stimulus_id, 1);
  EXPECT_EQ(r.rejected[1].stimulus_id, 3);
}

TEST(SegmentEpochs, RepetitionIndexCountsPerStimulus) {
  auto rec = make_recording(1, 20000, 1000.0);
  rec.events = {{1000, 4, StimulusKind::Static, 0, 0},
                {3000, 5, StimulusKind::Static, 0, 0},
                {5000, 4, StimulusKind::Static, 0, 0}};
  auto r = segment_epochs(rec, PreprocessConfig{}, StimulusKind::Static);
  ASSERT_EQ(r.epochs.trials(), 3u);
  EXPECT_EQ(r.epochs.labels[0].repetition, 0);
  EXPECT_EQ(r.epochs.labels[1].repetition, 0);
  EXPECT_EQ(r.epochs.labels[2].repetition, 1);
}

TEST(SegmentEpochs, UnsortedEventsRejected) {
  auto rec = make_recording(1, 20000, 1000.0);
  rec.events = {{3000, 1, StimulusKind::Static, 0, 0}, {1000, 2, StimulusKind::Static, 0, 0}};
  EXPECT_THROW(segment_epochs(rec, PreprocessConfig{}, StimulusKind::Static), std::invalid_argument);
}

// --- resample ------------------------------------------------------------

TEST(Resample, FourToOneLength) {
  auto e = single_channel(std::vector<double>(6000, 0.0), 1000.0);
  auto r = resample(e, 250.0);
  EXPECT_EQ(r.samples, 1500u);
  EXPECT_DOUBLE_EQ(r.rate, 250.0);
}

TEST(Resample, ZeroStaysZero) {
  auto r = resample(single_channel(std::vector<double>(4000, 0.0), 1000.0), 250.0);
  for (float v : r.data) EXPECT_EQ(v, 0.0f);
}

TEST(Resample, TenHertzSineMatchesAnalyticSamples) {
  const auto x = sine(10.0, 1000.0, 6000, 1.0, 0.3);
  auto r = resample(single_channel(x, 1000.0), 250.0);
  // Oracle: the analytic sine evaluated at the new sample times.
  double max_err = 0;
  for (std::size_t n = 0; n < r.samples; ++n) {
    const double expect = std::sin(2 * kPi * 10.0 * static_cast<double>(n) / 250.0 + 0.3);
    max_err = std::max(max_err, std::abs(r.at(0, 0, n) - expect));
  }
  EXPECT_LT(max_err, 0.01);
  EXPECT_NEAR(fitted_amplitude(r, 10.0, 0, r.samples), 1.0, 0.01);
}

TEST(Resample, BandLimitedEnergyPreserved) {
  std::vector<double> x(8000, 0.0);
  const double freqs[] = {3.0, 17.0, 41.0, 77.0, 96.0};
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (double f : freqs) x[i] += std::sin(2 * kPi * f * static_cast<double>(i) / 1000.0 + f);
  }
  auto e = single_channel(x, 1000.0);
  auto r = resample(e, 250.0);
  double ein = 0, eout = 0;
  for (float v : e.data) ein += static_cast<double>(v) * v;
  for (float v : r.data) eout += static_cast<double>(v) * v;
  ein /= static_cast<double>(e.samples);
  eout /= static_cast<double>(r.samples);
  EXPECT_NEAR(eout / ein, 1.0, 0.01);
}

TEST(Resample, RejectsNonPositiveRate) {
  auto e = single_channel(std::vector<double>(100, 0.0), 1000.0);
  EXPECT_THROW(resample(e, 0.0), std::invalid_argument);
  EXPECT_THROW(resample(e, -250.0), std::invalid_argument);
}

// --- band-pass / notch -------------------------------------------------

TEST(Bandpass, DcRemovedPerResponseOracle) {
  const double rate = 250.0;
  const auto sos = design_bandpass(0.1, 100.0, rate);
  const double oracle = std::pow(response_magnitude(sos, 0.0, rate, 1 << 20), 2);  // forward-backward
  EXPECT_LT(oracle, 0.01);
  auto e = single_channel(std::vector<double>(250 * 120, 3.0), rate);
  auto f = bandpass_filter(e, 0.1, 100.0);
  double peak = 0;
  for (std::size_t i = 250 * 50; i < 250 * 70; ++i) peak = std::max(peak, std::abs(static_cast<double>(f.at(0, 0, i))));
  EXPECT_LT(peak / 3.0, 0.01);
}

TEST(Bandpass, TenHertzPassesPerResponseOracle) {
  const double rate = 250.0;
  const auto sos = design_bandpass(0.1, 100.0, rate);
  const double oracle = std::pow(response_magnitude(sos, 10.0, rate), 2);
  EXPECT_GE(oracle, 0.95);
  auto f = bandpass_filter(single_channel(sine(10.0, rate, 250 * 60), rate), 0.1, 100.0);
  const double measured = fitted_amplitude(f, 10.0, 250 * 20, 250 * 40);
  EXPECT_GE(measured, 0.95);
  EXPECT_NEAR(measured, oracle, 0.01);
}

TEST(Bandpass, OneOctaveOutsideIsAttenuated20dB) {
  const double rate = 250.0;
  const auto sos = design_bandpass(4.0, 20.0, rate);
  EXPECT_LT(std::pow(response_magnitude(sos, 2.0, rate), 2), 0.1);
  EXPECT_LT(std::pow(response_magnitude(sos, 40.0, rate), 2), 0.1);
  // The published band at 250 Hz: the only reachable octave is below 0.1 Hz.
  const auto published = design_bandpass(0.1, 100.0, rate);
  EXPECT_LT(std::pow(response_magnitude(published, 0.05, rate, 1 << 21), 2), 0.1);
}

TEST(Bandpass, ZeroInZeroOut) {
  auto f = bandpass_filter(single_channel(std::vector<double>(500, 0.0), 250.0), 0.1, 100.0);
  for (float v : f.data) EXPECT_EQ(v, 0.0f);
}

TEST(Bandpass, ZeroPhaseNoLag) {
  const double rate = 250.0;
  auto x = sine(7.0, rate, 250 * 40);
  auto f = bandpass_filter(single_channel(x, rate), 0.1, 100.0);
  // Cross-correlation peak over lags in [-20, 20] on the central section.
  int best_lag = 100;
  double best = -1e300;
  for (int lag = -20; lag <= 20; ++lag) {
    double acc = 0;
    for (std::size_t i = 2000; i < 8000; ++i) acc += x[i] * f.at(0, 0, static_cast<std::size_t>(static_cast<long>(i) + lag));
    if (acc > best) { best = acc; best_lag = lag; }
  }
  EXPECT_EQ(best_lag, 0);
}

TEST(Bandpass, CutoffAboveNyquistIsAnError) {
  auto e = single_channel(std::vector<double>(500, 1.0), 250.0);
  EXPECT_THROW(bandpass_filter(e, 0.1, 130.0), FilterDesignError);
  EXPECT_THROW(bandpass_filter(e, 10.0, 5.0), FilterDesignError);
}

TEST(Notch, AttenuatesFiftyPassesTenPerOracle) {
  const double rate = 250.0;
  const auto sos = design_notch(50.0, 30.0, rate);
  EXPECT_LT(std::pow(response_magnitude(sos, 50.0, rate), 2), 0.01);   // >= 20 dB
  EXPECT_GE(std::pow(response_magnitude(sos, 40.0, rate), 2), 0.891);  // <= 1 dB
  EXPECT_GE(std::pow(response_magnitude(sos, 60.0, rate), 2), 0.891);

  auto f50 = notch_filter(single_channel(sine(50.0, rate, 250 * 30), rate), 50.0);
  EXPECT_LT(fitted_amplitude(f50, 50.0, 250 * 10, 250 * 20), 0.1);
  auto f10 = notch_filter(single_channel(sine(10.0, rate, 250 * 30), rate), 50.0);
  EXPECT_GE(fitted_amplitude(f10, 10.0, 250 * 10, 250 * 20), 0.9);
  auto zero = notch_filter(single_channel(std::vector<double>(300, 0.0), rate), 50.0);
  for (float v : zero.data) EXPECT_EQ(v, 0.0f);
}

TEST(Filter, UnstableSectionIsAnError) {
  std::vector<Biquad> bad{{1.0, 0.0, 0.0, 0.0, 1.5}};
  std::vector<double> x(10, 1.0);
  EXPECT_THROW(sosfiltfilt(bad, x), FilterDesignError);
}

// --- noise normalization -------------------------------------------------

// Trials of `conditions` stimuli with `reps` repetitions each, given a mixing
// matrix applied to white residuals plus a per-condition mean.
EpochSet mixed_trials(const Eigen::MatrixXd& mix, int conditions, int reps, std::size_t samples, RandomStream& rng) {
  EpochSet e;
  e.channels = static_cast<std::size_t>(mix.rows());
  e.samples = samples;
  for (int c = 0; c < conditions; ++c) {
    Eigen::MatrixXd mean = Eigen::MatrixXd::Random(mix.rows(), static_cast<Eigen::Index>(samples));
    for (int r = 0; r < reps; ++r) {
      Eigen::MatrixXd w(mix.cols(), static_cast<Eigen::Index>(samples));
      for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.normal();
      Eigen::MatrixXd v = mix * w + mean;
      e.labels.push_back({c, 0, 0, 0, r});
      for (Eigen::Index ch = 0; ch < v.rows(); ++ch)
        for (Eigen::Index s = 0; s < v.cols(); ++s) e.data.push_back(static_cast<float>(v(ch, s)));
    }
  }
  return e;
}

// Oracle covariance: plain residual covariance around each condition mean.
Eigen::MatrixXd empirical_residual_cov(const EpochSet& e) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t t = 0; t < e.trials(); ++t) groups[e.labels[t].stimulus_id].push_back(t);
  const auto C = static_cast<Eigen::Index>(e.channels);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(C, C);
  double n = 0;
  for (const auto& [id, m] : groups) {
    for (std::size_t s = 0; s < e.samples; ++s) {
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(C);
      for (std::size_t t : m)
        for (Eigen::Index c = 0; c < C; ++c) mu(c) += e.at(t, static_cast<std::size_t>(c), s);
      mu /= static_cast<double>(m.size());
      for (std::size_t t : m) {
        Eigen::VectorXd r(C);
        for (Eigen::Index c = 0; c < C; ++c) r(c) = e.at(t, static_cast<std::size_t>(c), s) - mu(c);
        cov += r * r.transpose();
      }
      n += static_cast<double>(m.size() - 1);
    }
  }
  return cov / n;
}

TEST(NoiseNormalize, AlreadyWhiteIsIdentity) {
  RandomStream rng(11);
  auto e = mixed_trials(Eigen::MatrixXd::Identity(4, 4), 3, 4, 50, rng);
  // Make the residual covariance exactly the identity, keeping the means.
  const Eigen::MatrixXd w = whitening_matrix(empirical_residual_cov(e), 0.0);
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t t = 0; t < e.trials(); ++t) groups[e.labels[t].stimulus_id].push_back(t);
  for (const auto& [id, m] : groups) {
    for (std::size_t s = 0; s < e.samples; ++s) {
      Eigen::VectorXd mu = Eigen::VectorXd::Zero(4);
      for (std::size_t t : m)
        for (int c = 0; c < 4; ++c) mu(c) += e.at(t, static_cast<std::size_t>(c), s);
      mu /= static_cast<double>(m.size());
      for (std::size_t t : m) {
        Eigen::VectorXd r(4);
        for (int c = 0; c < 4; ++c) r(c) = e.at(t, static_cast<std::size_t>(c), s) - mu(c);
        Eigen::VectorXd v = w * r + mu;
        for (int c = 0; c < 4; ++c) e.at(t, static_cast<std::size_t>(c), s) = static_cast<float>(v(c));
      }
    }
  }
  auto out = noise_normalize(e, 0.0);
  double max_diff = 0;
  for (std::size_t i = 0; i < e.data.size(); ++i) max_diff = std::max(max_diff, static_cast<double>(std::abs(out.data[i] - e.data[i])));
  EXPECT_LT(max_diff, 1e-5);  // float32 storage
}

TEST(NoiseNormalize, ScaledChannelsBecomeIdentity) {
  RandomStream rng(12);
  Eigen::MatrixXd mix = Eigen::MatrixXd::Identity(5, 5);
  mix(0, 0) = 2.0;
  auto e = mixed_trials(mix, 4, 4, 100, rng);
  auto out = noise_normalize(e, 0.0);
  const Eigen::MatrixXd cov = empirical_residual_cov(out);
  EXPECT_LT((cov - Eigen::MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(NoiseNormalize, TwoHundredTrialsWhiteAfterTransform) {
  RandomStream rng(13);
  Eigen::MatrixXd mix = Eigen::MatrixXd::Random(6, 6) + 2.0 * Eigen::MatrixXd::Identity(6, 6);
  auto e = mixed_trials(mix, 50, 4, 40, rng);  // 200 trials
  auto out = noise_normalize(e, 0.0);
  EXPECT_LT((empirical_residual_cov(out) - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff(), 1e-2);
}

TEST(NoiseNormalize, DuplicateChannelsNeedShrinkage) {
  RandomStream rng(14);
  Eigen::MatrixXd mix(3, 2);
  mix << 1, 0, 1, 0, 0, 1;  // channels 0 and 1 identical
  auto e = mixed_trials(mix, 2, 4, 30, rng);
  EXPECT_THROW(noise_normalize(e, 0.0), SingularCovarianceError);
  auto out = noise_normalize(e, 0.5);
  for (float v : out.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(NoiseNormalize, NeedsTwoTrials) {
  auto e = single_channel({1.0, 2.0, 3.0}, 250.0);
  EXPECT_THROW(noise_normalize(e, 0.1), std::invalid_argument);
}

// --- repetition averaging ------------------------------------------------

EpochSet repeated(const std::vector<float>& values, int stimulus) {
  EpochSet e;
  e.channels = 1;
  e.samples = 3;
  int r = 0;
  for (float v : values) {
    e.labels.push_back({stimulus, 2, 1, 0, r++});
    e.data.insert(e.data.end(), {v, v, v});
  }
  return e;
}

TEST(AverageRepetitions, TestModeMeans) {
  auto out = average_repetitions(repeated({1, 2, 3, 4}, 9), SplitMode::Test);
  ASSERT_EQ(out.trials(), 1u);
  for (float v : out.data) EXPECT_FLOAT_EQ(v, 2.5f);
  EXPECT_EQ(out.labels[0].stimulus_id, 9);
  EXPECT_EQ(out.labels[0].repetition, -1);
  auto same = average_repetitions(repeated({7, 7, 7, 7}, 1), SplitMode::Test);
  for (float v : same.data) EXPECT_FLOAT_EQ(v, 7.0f);
}

TEST(AverageRepetitions, TrainModeIsIdentity) {
  auto e = repeated({1, 2, 3, 4, 5, 6, 7, 8}, 3);
  EXPECT_EQ(average_repetitions(e, SplitMode::Train), e);
}

TEST(AverageRepetitions, WrongRepetitionCountNamesStimulus) {
  try {
    average_repetitions(repeated({1, 2, 3}, 42), SplitMode::Test);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& ex) {
    EXPECT_NE(std::string(ex.what()).find("42"), std::string::npos);
  }
}

TEST(AverageRepetitions, CommutesWithChannelTransform) {
  RandomStream rng(15);
  auto e = mixed_trials(Eigen::MatrixXd::Identity(3, 3), 3, 4, 20, rng);
  const Eigen::MatrixXd w = Eigen::MatrixXd::Random(3, 3);
  auto a = average_repetitions(apply_channel_transform(e, w), SplitMode::Test);
  auto b = apply_channel_transform(average_repetitions(e, SplitMode::Test), w);
  ASSERT_EQ(a.data.size(), b.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-5);
}

// --- pipeline ------------------------------------------------------------

TEST(Preprocess, DeterministicAndShaped) {
  RandomStream rng(16);
  auto rec = make_recording(4, 60000, 1000.0);
  for (float& v : rec.data) v = static_cast<float>(rng.normal());
  for (int i = 0; i < 4; ++i) {
    rec.events.push_back({static_cast<std::size_t>(1000 + i * 8000), i % 2, StimulusKind::Static, i % 2, 0});
    rec.events.push_back({static_cast<std::size_t>(2500 + i * 8000), i % 2, StimulusKind::Dynamic, i % 2, 0});
  }
  rec.events.push_back({59500, 9, StimulusKind::Dynamic, 0, 0});  // rejected
  auto a = preprocess(rec, PreprocessConfig{});
  auto b = preprocess(rec, PreprocessConfig{});
  EXPECT_EQ(a.static_epochs, b.static_epochs);
  EXPECT_EQ(a.dynamic_epochs, b.dynamic_epochs);
  EXPECT_EQ(a.static_epochs.samples, 250u);
  EXPECT_EQ(a.dynamic_epochs.samples, 1500u);
  EXPECT_EQ(a.static_epochs.trials(), 4u);
  EXPECT_EQ(a.dynamic_epochs.trials(), 4u);
  ASSERT_EQ(a.rejected.size(), 1u);
  EXPECT_EQ(a.rejected[0].stimulus_id, 9);
}

}  // namespace
