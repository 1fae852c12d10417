// Recursive forecasting from a short seed window, MAE evaluation and benchmark reports.
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qdbench/errors.hpp"
#include "qdbench/krr.hpp"
#include "qdbench/nnet.hpp"
#include "qdbench/refdyn.hpp"

namespace qdbench::forecast {

// A forecast produced NaN or inf. step is the 0-based index of the offending prediction.
class DivergenceError : public NumericalError {
public:
    DivergenceError(std::size_t step, double value);
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

// Uniform next-value interface over a trained model. Copies share the wrapped model.
class Forecaster {
public:
    using Fn = std::function<double(std::span<const double>)>;

    Forecaster(std::string name, std::size_t window_length, std::size_t parameter_count, Fn fn);

    static Forecaster from_krr(std::string name, krr::KrrModel model);
    static Forecaster from_net(std::string name, nn::NetModel model);

    // Throws ConfigError when the window length differs from window_length().
    double predict(std::span<const double> window) const;

    const std::string& name() const { return name_; }
    std::size_t window_length() const { return window_length_; }
    std::size_t parameter_count() const { return parameter_count_; }

private:
    std::string name_;
    std::size_t window_length_;
    std::size_t parameter_count_;
    Fn fn_;
};

// Predicts n_steps values, sliding the window over its own predictions.
std::vector<double> recursive_forecast(const Forecaster& f, std::span<const double> seed_window, std::size_t n_steps);

// Mean absolute difference; throws ConfigError on empty or mismatched input.
double evaluate_mae(std::span<const double> predicted, std::span<const double> reference);

struct BenchmarkModel {
    Forecaster forecaster;
    double train_seconds{0.0};
};

struct BenchmarkConfig {
    std::size_t seed_points{41};   // ground-truth values fed to the first prediction
    int timing_repeats{5};         // prediction time is the median over repeats
    // Timing uses at most this many holdout trajectories (0 = all).
    std::size_t timing_trajectories{0};
};

struct TrajectoryForecast {
    refdyn::SpinBosonParams params;
    std::vector<double> times;      // times of the predicted points
    std::vector<double> reference;
    std::vector<double> predicted;  // shorter than reference when the forecast diverged
    bool diverged{false};
    std::size_t divergence_step{0};
};

struct BenchmarkRow {
    std::string model;
    std::size_t parameters{0};
    // Pooled over all predicted points; +inf when any forecast diverged, NaN when
    // the holdout has no trajectory of that kind.
    double mae{0.0};
    double mae_symmetric{0.0};
    double mae_asymmetric{0.0};
    double train_seconds{0.0};
    double predict_seconds{0.0};  // mean single-step prediction time
    std::vector<TrajectoryForecast> trajectories;
};

struct BenchmarkReport {
    std::vector<BenchmarkRow> rows;  // ascending pooled MAE
};

// Forecasts every holdout trajectory from its first seed_points values to its end.
BenchmarkReport run_benchmark(const std::vector<BenchmarkModel>& models,
                              const std::vector<refdyn::Trajectory>& holdout, const BenchmarkConfig& cfg = {});

// model,parameters,mae,mae_symmetric,mae_asymmetric,train_seconds,predict_seconds
void write_report_csv(const BenchmarkReport& report, const std::filesystem::path& path);
// Rows plus per-trajectory predictions and absolute error series; non-finite MAEs are null.
void write_report_json(const BenchmarkReport& report, const std::filesystem::path& path);
// One `t,reference,predicted` file per (model, trajectory); returns the paths written.
std::vector<std::filesystem::path> write_plot_files(const BenchmarkReport& report, const std::filesystem::path& dir);

}  // namespace qdbench::forecast
