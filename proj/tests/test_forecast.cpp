#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <json.hpp>

#include "qdbench/forecast.hpp"

using namespace qdbench;
using namespace qdbench::forecast;

namespace {

constexpr double dt = 0.1;

refdyn::Trajectory make_traj(double eps, const std::function<double(double)>& f, std::size_t n = 201) {
    refdyn::Trajectory t;
    t.params.epsilon = eps;
    t.params.lambda = 0.1 + eps;
    for (std::size_t i = 0; i < n; ++i) {
        t.times.push_back(dt * static_cast<double>(i));
        t.values.push_back(f(dt * static_cast<double>(i)));
    }
    return t;
}

// cos(t + dt) = 2 cos(dt) cos(t) - cos(t - dt)
Forecaster cos_oracle(std::size_t window = 41) {
    return Forecaster("oracle", window, 0, [](std::span<const double> w) {
        return 2.0 * std::cos(dt) * w[w.size() - 1] - w[w.size() - 2];
    });
}

Forecaster constant(double c, std::size_t window = 41) {
    return Forecaster("const", window, 1, [c](std::span<const double>) { return c; });
}

}  // namespace

TEST_CASE("constant forecaster") {
    const std::vector<double> seed(41, 0.3);
    const auto out = recursive_forecast(constant(0.7), seed, 25);
    REQUIRE(out.size() == 25);
    for (double v : out) CHECK(v == 0.7);
}

TEST_CASE("exact cosine recursion") {
    const auto traj = make_traj(0, [](double t) { return std::cos(t); });
    const auto out = recursive_forecast(cos_oracle(), std::span<const double>(traj.values.data(), 41), 160);
    REQUIRE(out.size() == 160);
    double worst = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) worst = std::max(worst, std::abs(out[i] - std::cos(dt * double(41 + i))));
    CHECK(worst < 1e-10);
}

TEST_CASE("window slides over predictions") {
    // each prediction is a quarter of the window sum; check against a hand loop
    const Forecaster f("sum", 3, 0, [](std::span<const double> w) { return 0.25 * (w[0] + w[1] + w[2]); });
    std::vector<double> buf{1.0, 2.0, 3.0};
    const auto out = recursive_forecast(f, std::vector<double>(buf), 6);
    for (std::size_t i = 0; i < 6; ++i) {
        buf.push_back(0.25 * (buf[i] + buf[i + 1] + buf[i + 2]));
        CHECK(out[i] == buf[i + 3]);
    }
}

TEST_CASE("divergence reports the step index") {
    int calls = 0;
    const Forecaster f("blowup", 2, 0, [&calls](std::span<const double> w) {
        return ++calls == 4 ? std::numeric_limits<double>::infinity() : w[1];
    });
    try {
        recursive_forecast(f, std::vector<double>{1.0, 1.0}, 10);
        FAIL("expected divergence");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 3);
        CHECK(std::string(e.what()).find("step 3") != std::string::npos);
    }
    const Forecaster nan_f("nan", 2, 0, [](std::span<const double>) { return std::nan(""); });
    CHECK_THROWS_AS(recursive_forecast(nan_f, std::vector<double>{1.0, 1.0}, 1), NumericalError);
}

TEST_CASE("argument checks") {
    CHECK_THROWS_AS(recursive_forecast(constant(0, 41), std::vector<double>(40, 0.0), 3), ConfigError);
    CHECK_THROWS_AS(recursive_forecast(constant(0, 41), std::vector<double>(41, 0.0), 0), ConfigError);
    CHECK_THROWS_AS(constant(0, 4).predict(std::vector<double>(5, 0.0)), ConfigError);
}

TEST_CASE("mae") {
    const std::vector<double> a{0.1, -0.4, 0.9};
    CHECK(evaluate_mae(a, a) == 0.0);
    std::vector<double> b = a;
    for (double& v : b) v += 0.1;
    CHECK(evaluate_mae(b, a) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK_THROWS_AS(evaluate_mae(a, std::vector<double>{1.0}), ConfigError);
    CHECK_THROWS_AS(evaluate_mae(std::vector<double>{}, std::vector<double>{}), ConfigError);

    std::mt19937_64 g(3);
    std::normal_distribution<double> n;
    std::vector<double> p(500), r(500);
    for (std::size_t i = 0; i < 500; ++i) {
        p[i] = n(g);
        r[i] = n(g);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < 500; ++i) s += std::fabs(p[i] - r[i]);
    CHECK(std::abs(evaluate_mae(p, r) - s / 500.0) < 1e-15);
}

TEST_CASE("model wrappers agree with the models") {
    krr::RowMatrix x(5, 4);
    x.setRandom();
    const Eigen::VectorXd y = Eigen::VectorXd::LinSpaced(5, -1, 1);
    const auto km = krr::krr_train(x, y, krr::KernelSpec::gaussian(2.0), 1e-6);
    const auto kf = Forecaster::from_krr("krr-g", km);
    CHECK(kf.window_length() == 4);
    CHECK(kf.parameter_count() == 5);
    const std::vector<double> w{0.1, 0.2, -0.3, 0.5};
    CHECK(kf.predict(w) == krr::krr_predict(km, w));

    const auto nm = nn::build_model("gru", 7);
    const auto nf = Forecaster::from_net("gru", nm);
    CHECK(nf.window_length() == 41);
    CHECK(nf.parameter_count() == 553453);
    const std::vector<double> w41(41, 0.25);
    CHECK(nf.predict(w41) == nn::predict(nm, w41));
}

TEST_CASE("benchmark rows, ordering and bookkeeping") {
    std::vector<refdyn::Trajectory> hold;
    hold.push_back(make_traj(0, [](double t) { return std::cos(t); }));
    hold.push_back(make_traj(1, [](double t) { return std::cos(t + 0.3); }));
    hold.push_back(make_traj(0, [](double t) { return std::cos(t - 1.0); }, 101));

    // records every window it sees so the seeds can be checked
    auto seen = std::make_shared<std::vector<std::vector<double>>>();
    const Forecaster spy("spy", 41, 2, [seen](std::span<const double> w) {
        seen->emplace_back(w.begin(), w.end());
        return 0.0;
    });
    const Forecaster bad("bad", 41, 3, [](std::span<const double> w) { return 3.0 * w[40]; });
    const Forecaster blowup("blowup", 41, 4, [](std::span<const double> w) { return w[40] * 1e300 * 1e300; });

    BenchmarkConfig cfg;
    cfg.timing_repeats = 3;
    const auto rep = run_benchmark({{bad, 1.0}, {spy, 2.0}, {blowup, 0.5}, {cos_oracle(), 3.0}}, hold, cfg);
    REQUIRE(rep.rows.size() == 4);
    CHECK(rep.rows[0].model == "oracle");
    CHECK(rep.rows[0].mae < 1e-10);
    CHECK(rep.rows[0].train_seconds == 3.0);
    CHECK(rep.rows[0].predict_seconds > 0.0);
    CHECK(rep.rows[1].model == "spy");
    CHECK(rep.rows[3].model == "blowup");
    CHECK(std::isinf(rep.rows[3].mae));
    CHECK(rep.rows[3].trajectories[0].diverged);
    CHECK(rep.rows[3].trajectories[0].divergence_step == 0);

    for (const auto& r : rep.rows) {
        REQUIRE(r.trajectories.size() == 3);
        CHECK(r.trajectories[0].reference.size() == 160);
        CHECK(r.trajectories[2].reference.size() == 60);
        CHECK(r.trajectories[0].times.front() == doctest::Approx(4.1));
    }
    for (std::size_t k : {0, 1, 2}) CHECK(rep.rows[1].trajectories[k].predicted.size() == hold[k].size() - 41);

    // first window of each trajectory is the ground truth
    CHECK((*seen)[0] == std::vector<double>(hold[0].values.begin(), hold[0].values.begin() + 41));
    CHECK((*seen)[160] == std::vector<double>(hold[1].values.begin(), hold[1].values.begin() + 41));

    // symmetric and asymmetric pools
    const auto& spy_row = rep.rows[1];
    double s_sym = 0.0, s_all = 0.0;
    for (std::size_t k : {0, 2})
        for (double v : spy_row.trajectories[k].reference) s_sym += std::abs(v);
    for (std::size_t k : {0, 1, 2})
        for (double v : spy_row.trajectories[k].reference) s_all += std::abs(v);
    double s_asym = 0.0;
    for (double v : spy_row.trajectories[1].reference) s_asym += std::abs(v);
    CHECK(spy_row.mae_symmetric == doctest::Approx(s_sym / 220.0).epsilon(1e-13));
    CHECK(spy_row.mae_asymmetric == doctest::Approx(s_asym / 160.0).epsilon(1e-13));
    CHECK(spy_row.mae == doctest::Approx(s_all / 380.0).epsilon(1e-13));

    const auto dir = std::filesystem::temp_directory_path() / "qdbench_forecast_test";
    std::filesystem::remove_all(dir);
    write_report_csv(rep, dir / "report.csv");
    write_report_json(rep, dir / "report.json");
    const auto plots = write_plot_files(rep, dir / "plots");
    CHECK(plots.size() == 12);

    std::ifstream csv(dir / "report.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "model,parameters,mae,mae_symmetric,mae_asymmetric,train_seconds,predict_seconds");
    int rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 4);

    std::ifstream js(dir / "report.json");
    const auto j = nlohmann::json::parse(js);
    CHECK(j["rows"].size() == 4);
    CHECK(j["rows"][3]["mae"].is_null());
    CHECK(j["rows"][3]["diverged"] == true);
    CHECK(j["rows"][1]["trajectories"][0]["abs_error"].size() == 160);

    std::ifstream plot(plots.front());
    std::getline(plot, line);
    CHECK(line == "t,reference,predicted");
    std::filesystem::remove_all(dir);
}

TEST_CASE("benchmark argument checks") {
    const std::vector<refdyn::Trajectory> hold{make_traj(0, [](double t) { return std::cos(t); })};
    CHECK_THROWS_AS(run_benchmark({}, hold), ConfigError);
    CHECK_THROWS_AS(run_benchmark({{constant(0.0)}}, {}), ConfigError);
    CHECK_THROWS_AS(run_benchmark({{constant(0.0, 30)}}, hold), ConfigError);
    const std::vector<refdyn::Trajectory> short_hold{make_traj(0, [](double t) { return t; }, 41)};
    CHECK_THROWS_AS(run_benchmark({{constant(0.0)}}, short_hold), ConfigError);
}

TEST_CASE("nonlinear kernel beats the linear kernel on saturating dynamics") {
    // x(t) = tanh(2 exp(-g t) cos(w t)) is not a linear recurrence in its past values
    std::vector<refdyn::Trajectory> train, hold;
    std::mt19937_64 g(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 48; ++i) {
        const double gam = 0.1 + 0.1 * u(g), w = 1.0 + 0.5 * u(g);
        auto t = make_traj(0, [&](double s) { return std::tanh(2.0 * std::exp(-gam * s) * std::cos(w * s)); });
        (i < 40 ? train : hold).push_back(t);
    }
    const auto ds = data::build_dataset(train, 42, 1);
    const auto sub = data::subsample(ds, 1500, 2);
    const auto kl = krr::krr_train(sub, krr::KernelSpec::linear(), 1e-8);
    const auto kg = krr::krr_train(sub, krr::KernelSpec::gaussian(2.0), 1e-8);
    const auto rep = run_benchmark({{Forecaster::from_krr("krr-l", kl)}, {Forecaster::from_krr("krr-g", kg)}}, hold,
                                   {41, 1, 2});
    CHECK(rep.rows[0].model == "krr-g");
    CHECK(rep.rows[0].mae * 2.0 < rep.rows[1].mae);
}
