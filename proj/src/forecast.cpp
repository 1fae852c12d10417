#include "qdbench/forecast.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

namespace qdbench::forecast {

namespace {

std::string describe(double v) {
    std::ostringstream s;
    s << v;
    return s.str();
}

using Clock = std::chrono::steady_clock;

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Pooled mean of |p - r| over the trajectories selected by `keep`.
double pooled_mae(const std::vector<TrajectoryForecast>& ts, const std::function<bool(const TrajectoryForecast&)>& keep) {
    double sum = 0.0;
    std::size_t n = 0;
    bool any = false;
    for (const auto& t : ts) {
        if (!keep(t)) continue;
        any = true;
        if (t.diverged) return std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < t.predicted.size(); ++i) sum += std::abs(t.predicted[i] - t.reference[i]);
        n += t.predicted.size();
    }
    if (!any) return std::numeric_limits<double>::quiet_NaN();
    return n ? sum / static_cast<double>(n) : 0.0;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot write " + path.string());
    f << std::setprecision(17);
    return f;
}

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string plot_name(const std::string& model, const refdyn::SpinBosonParams& p) {
    auto stem = std::filesystem::path(refdyn::trajectory_filename(p)).stem().string();
    return model + "__" + stem + ".csv";
}

}  // namespace

DivergenceError::DivergenceError(std::size_t step, double value)
    : NumericalError("forecast diverged at step " + std::to_string(step) + " (value " + describe(value) + ")"),
      step_(step) {}

Forecaster::Forecaster(std::string name, std::size_t window_length, std::size_t parameter_count, Fn fn)
    : name_(std::move(name)), window_length_(window_length), parameter_count_(parameter_count), fn_(std::move(fn)) {
    if (window_length_ == 0) throw ConfigError("forecaster window length must be positive");
    if (!fn_) throw ConfigError("forecaster needs a prediction function");
}

Forecaster Forecaster::from_krr(std::string name, krr::KrrModel model) {
    auto m = std::make_shared<const krr::KrrModel>(std::move(model));
    const std::size_t t = m->window_length(), n = m->size();
    return Forecaster(std::move(name), t, n, [m](std::span<const double> w) { return krr::krr_predict(*m, w); });
}

Forecaster Forecaster::from_net(std::string name, nn::NetModel model) {
    auto m = std::make_shared<const nn::NetModel>(std::move(model));
    const auto t = static_cast<std::size_t>(m->spec.input_length * m->spec.input_channels);
    return Forecaster(std::move(name), t, static_cast<std::size_t>(m->parameters.size()),
                      [m](std::span<const double> w) { return nn::predict(*m, w); });
}

double Forecaster::predict(std::span<const double> window) const {
    if (window.size() != window_length_)
        throw ConfigError("window of length " + std::to_string(window.size()) + " given to " + name_ +
                          ", which expects " + std::to_string(window_length_));
    return fn_(window);
}

std::vector<double> recursive_forecast(const Forecaster& f, std::span<const double> seed_window, std::size_t n_steps) {
    if (seed_window.size() != f.window_length())
        throw ConfigError("seed window has length " + std::to_string(seed_window.size()) + ", expected " +
                          std::to_string(f.window_length()));
    if (n_steps == 0) throw ConfigError("n_steps must be at least 1");
    const std::size_t t = seed_window.size();
    // the window is the last t entries of buf
    std::vector<double> buf(seed_window.begin(), seed_window.end());
    buf.reserve(t + n_steps);
    for (std::size_t i = 0; i < n_steps; ++i) {
        const double p = f.predict(std::span<const double>(buf.data() + i, t));
        if (!std::isfinite(p)) throw DivergenceError(i, p);
        buf.push_back(p);
    }
    return {buf.begin() + static_cast<std::ptrdiff_t>(t), buf.end()};
}

double evaluate_mae(std::span<const double> predicted, std::span<const double> reference) {
    if (predicted.size() != reference.size())
        throw ConfigError("mae: " + std::to_string(predicted.size()) + " predictions vs " +
                          std::to_string(reference.size()) + " reference values");
    if (predicted.empty()) throw ConfigError("mae of empty sequences");
    double s = 0.0;
    for (std::size_t i = 0; i < predicted.size(); ++i) s += std::abs(predicted[i] - reference[i]);
    return s / static_cast<double>(predicted.size());
}

BenchmarkReport run_benchmark(const std::vector<BenchmarkModel>& models, const std::vector<refdyn::Trajectory>& holdout,
                              const BenchmarkConfig& cfg) {
    if (models.empty()) throw ConfigError("benchmark needs at least one model");
    if (holdout.empty()) throw ConfigError("benchmark needs at least one holdout trajectory");
    if (cfg.timing_repeats < 1) throw ConfigError("timing_repeats must be at least 1");
    for (const auto& m : models)
        if (m.forecaster.window_length() != cfg.seed_points)
            throw ConfigError("model " + m.forecaster.name() + " has window length " +
                              std::to_string(m.forecaster.window_length()) + ", benchmark seeds " +
                              std::to_string(cfg.seed_points) + " points");
    for (const auto& t : holdout)
        if (t.size() <= cfg.seed_points)
            throw ConfigError("holdout trajectory with " + std::to_string(t.size()) + " points is not longer than the seed");

    BenchmarkReport report;
    for (const auto& m : models) {
        const Forecaster& f = m.forecaster;
        BenchmarkRow row;
        row.model = f.name();
        row.parameters = f.parameter_count();
        row.train_seconds = m.train_seconds;

        std::vector<double> step_times;
        const std::size_t n_timed =
            cfg.timing_trajectories ? std::min(cfg.timing_trajectories, holdout.size()) : holdout.size();
        for (int rep = 0; rep < cfg.timing_repeats; ++rep) {
            double elapsed = 0.0;
            std::size_t steps = 0;
            const std::size_t n_run = rep == 0 ? holdout.size() : n_timed;
            for (std::size_t k = 0; k < n_run; ++k) {
                const auto& traj = holdout[k];
                const std::span<const double> seed(traj.values.data(), cfg.seed_points);
                const std::size_t n_steps = traj.size() - cfg.seed_points;
                TrajectoryForecast tf;
                const auto t0 = Clock::now();
                try {
                    tf.predicted = recursive_forecast(f, seed, n_steps);
                } catch (const DivergenceError& e) {
                    tf.diverged = true;
                    tf.divergence_step = e.step();
                }
                const double dt = std::chrono::duration<double>(Clock::now() - t0).count();
                if (k < n_timed && !tf.diverged) {
                    elapsed += dt;
                    steps += n_steps;
                }
                if (rep == 0) {
                    tf.params = traj.params;
                    tf.times.assign(traj.times.begin() + static_cast<std::ptrdiff_t>(cfg.seed_points), traj.times.end());
                    tf.reference.assign(traj.values.begin() + static_cast<std::ptrdiff_t>(cfg.seed_points),
                                        traj.values.end());
                    if (tf.diverged) {
                        // keep the finite prefix for inspection
                        std::vector<double> buf(seed.begin(), seed.end());
                        for (std::size_t i = 0; i < tf.divergence_step; ++i) {
                            const double p = f.predict(std::span<const double>(buf.data() + i, cfg.seed_points));
                            buf.push_back(p);
                            tf.predicted.push_back(p);
                        }
                    }
                    row.trajectories.push_back(std::move(tf));
                }
            }
            if (steps) step_times.push_back(elapsed / static_cast<double>(steps));
        }
        row.predict_seconds = step_times.empty() ? std::numeric_limits<double>::quiet_NaN() : median(step_times);
        row.mae = pooled_mae(row.trajectories, [](const auto&) { return true; });
        row.mae_symmetric = pooled_mae(row.trajectories, [](const auto& t) { return t.params.epsilon == 0.0; });
        row.mae_asymmetric = pooled_mae(row.trajectories, [](const auto& t) { return t.params.epsilon != 0.0; });
        report.rows.push_back(std::move(row));
    }
    std::stable_sort(report.rows.begin(), report.rows.end(),
                     [](const BenchmarkRow& a, const BenchmarkRow& b) { return a.mae < b.mae; });
    return report;
}

void write_report_csv(const BenchmarkReport& report, const std::filesystem::path& path) {
    auto f = open_out(path);
    f << "model,parameters,mae,mae_symmetric,mae_asymmetric,train_seconds,predict_seconds\n";
    for (const auto& r : report.rows)
        f << r.model << ',' << r.parameters << ',' << r.mae << ',' << r.mae_symmetric << ',' << r.mae_asymmetric << ','
          << r.train_seconds << ',' << r.predict_seconds << '\n';
}

void write_report_json(const BenchmarkReport& report, const std::filesystem::path& path) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        nlohmann::json trajs = nlohmann::json::array();
        for (const auto& t : r.trajectories) {
            std::vector<double> err;
            for (std::size_t i = 0; i < t.predicted.size(); ++i) err.push_back(std::abs(t.predicted[i] - t.reference[i]));
            trajs.push_back({{"epsilon", t.params.epsilon},
                             {"delta", t.params.delta},
                             {"lambda", t.params.lambda},
                             {"omega_c", t.params.omega_c},
                             {"beta", t.params.beta},
                             {"diverged", t.diverged},
                             {"divergence_step", t.diverged ? nlohmann::json(t.divergence_step) : nlohmann::json(nullptr)},
                             {"t_start", t.times.empty() ? 0.0 : t.times.front()},
                             {"predicted", t.predicted},
                             {"abs_error", err}});
        }
        rows.push_back({{"model", r.model},
                        {"parameters", r.parameters},
                        {"mae", finite_or_null(r.mae)},
                        {"mae_symmetric", finite_or_null(r.mae_symmetric)},
                        {"mae_asymmetric", finite_or_null(r.mae_asymmetric)},
                        {"diverged", std::isinf(r.mae)},
                        {"train_seconds", r.train_seconds},
                        {"predict_seconds", finite_or_null(r.predict_seconds)},
                        {"trajectories", trajs}});
    }
    auto f = open_out(path);
    f << nlohmann::json{{"rows", rows}}.dump(1) << '\n';
}

std::vector<std::filesystem::path> write_plot_files(const BenchmarkReport& report, const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    for (const auto& r : report.rows)
        for (const auto& t : r.trajectories) {
            const auto path = dir / plot_name(r.model, t.params);
            auto f = open_out(path);
            f << "t,reference,predicted\n";
            for (std::size_t i = 0; i < t.reference.size(); ++i) {
                f << t.times[i] << ',' << t.reference[i] << ',';
                if (i < t.predicted.size()) f << t.predicted[i];
                f << '\n';
            }
            out.push_back(path);
        }
    return out;
}

}  // namespace qdbench::forecast
