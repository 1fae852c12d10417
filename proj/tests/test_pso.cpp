#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "qdbench/errors.hpp"
#include "qdbench/nnet.hpp"
#include "qdbench/pso.hpp"

using namespace qdbench;
using namespace qdbench::pso;

namespace {

double sphere(const Eigen::VectorXd& x) { return x.squaredNorm(); }

PsoConfig box(int dims, double half, int particles, int generations, std::uint64_t seed = 0) {
    PsoConfig c;
    c.bounds.assign(static_cast<std::size_t>(dims), {-half, half});
    c.n_particles = particles;
    c.n_generations = generations;
    c.seed = seed;
    return c;
}

void check_monotone(const PsoResult& r) {
    for (std::size_t i = 1; i < r.history.size(); ++i) CHECK(r.history[i].best_fitness <= r.history[i - 1].best_fitness);
    CHECK(r.history.back().best_fitness == r.best_fitness);
}

}  // namespace

TEST_CASE("particle at the global best with zero velocity stays put") {
    PsoConfig c = box(3, 2.0, 1, 5);
    c.velocity_scale = 0.0;
    Swarm s = initialize_swarm(sphere, c);
    const Eigen::VectorXd x0 = s.particles[0].x;
    for (int i = 0; i < 4; ++i) pso_step(s, sphere, c);
    CHECK(s.particles[0].x == x0);
    CHECK(s.particles[0].v.isZero(0.0));
}

TEST_CASE("pure social term points at the global best") {
    PsoConfig c = box(2, 3.0, 4, 5, 9);
    c.w = 0.0;
    c.c_p = 0.0;
    c.c_g = 0.8;
    c.limits.assign(2, {-1e9, 1e9});
    Swarm s = initialize_swarm(sphere, c);
    const Eigen::VectorXd g = s.global_best;
    std::vector<Eigen::VectorXd> x0;
    for (const auto& p : s.particles) x0.push_back(p.x);
    pso_step(s, sphere, c);
    for (std::size_t i = 0; i < s.particles.size(); ++i)
        CHECK((s.particles[i].v - 0.8 * (g - x0[i])).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("update rule against a hand evaluation") {
    std::mt19937_64 g(5);
    std::uniform_real_distribution<double> u(-2.0, 2.0);
    for (bool move_new : {false, true}) {
        PsoConfig c = box(2, 2.0, 3, 5, 3);
        c.limits.assign(2, {-1e9, 1e9});
        c.move_with_new_velocity = move_new;
        Swarm s = initialize_swarm(sphere, c);
        for (auto& p : s.particles) {
            p.v = Eigen::Vector2d(u(g), u(g));
            p.best_x = Eigen::Vector2d(u(g), u(g));
            p.best_fitness = -1.0;  // keep the personal bests fixed through the step
        }
        s.global_best = Eigen::Vector2d(u(g), u(g));
        s.global_best_fitness = -1.0;
        std::vector<std::array<double, 4>> expect;  // x0, x1, v0, v1 after the step
        for (const auto& p : s.particles) {
            std::array<double, 4> e{};
            for (int d = 0; d < 2; ++d) {
                const double vn = 0.729 * p.v(d) + 1.49445 * (p.best_x(d) - p.x(d)) + 1.49445 * (s.global_best(d) - p.x(d));
                e[static_cast<std::size_t>(d)] = p.x(d) + (move_new ? vn : p.v(d));
                e[static_cast<std::size_t>(2 + d)] = vn;
            }
            expect.push_back(e);
        }
        pso_step(s, sphere, c);
        for (std::size_t i = 0; i < 3; ++i) {
            const auto& p = s.particles[i];
            CHECK(std::abs(p.x(0) - expect[i][0]) < 1e-12);
            CHECK(std::abs(p.x(1) - expect[i][1]) < 1e-12);
            CHECK(std::abs(p.v(0) - expect[i][2]) < 1e-12);
            CHECK(std::abs(p.v(1) - expect[i][3]) < 1e-12);
        }
    }
}

TEST_CASE("position moves by the previous velocity exactly") {
    PsoConfig c = box(4, 1.0, 5, 2, 12);
    c.limits.assign(4, {-1e12, 1e12});
    Swarm s = initialize_swarm(sphere, c);
    std::vector<Eigen::VectorXd> x0, v0;
    for (const auto& p : s.particles) {
        x0.push_back(p.x);
        v0.push_back(p.v);
    }
    pso_step(s, sphere, c);
    for (std::size_t i = 0; i < x0.size(); ++i) CHECK(s.particles[i].x == x0[i] + v0[i]);
}

TEST_CASE("invalid coordinates are re-drawn from the initial interval") {
    PsoConfig c = box(3, 1.0, 6, 30, 4);
    c.bounds = {{0.5, 1.0}, {2.0, 3.0}, {-1.0, 1.0}};
    c.limits = {{0.0, 1e9}, {2.0, 3.0}, {-1.0, 1.0}};
    c.velocity_scale = 2.0;
    const auto r = pso_optimize([](const Eigen::VectorXd& x) { return -x.sum(); }, c);
    for (const auto& h : r.history) {
        CHECK(h.position(0) >= 0.0);
        CHECK(h.position(1) >= 2.0);
        CHECK(h.position(1) <= 3.0);
        CHECK(std::abs(h.position(2)) <= 1.0);
    }
}

TEST_CASE("sphere function, classical variant") {
    PsoConfig c = box(4, 5.0, 12, 50);
    c.stochastic = true;
    c.move_with_new_velocity = true;
    const auto r = pso_optimize(sphere, c);
    CHECK(r.best_fitness < 1e-3);
    CHECK(r.history.size() == 12u * 50u);
    CHECK(r.history.front().generation == 1);
    CHECK(r.history.back().generation == 50);
    check_monotone(r);
}

TEST_CASE("literal update keeps the global best monotone") {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto r = pso_optimize(sphere, box(4, 5.0, 12, 50, seed));
        check_monotone(r);
        double min_seen = std::numeric_limits<double>::infinity();
        for (const auto& h : r.history) min_seen = std::min(min_seen, h.fitness);
        CHECK(r.best_fitness == min_seen);
        CHECK(sphere(r.best_position) == r.best_fitness);
    }
}

TEST_CASE("constant objective") {
    const auto r = pso_optimize([](const Eigen::VectorXd&) { return 2.5; }, box(3, 1.0, 3, 10));
    CHECK(r.best_fitness == 2.5);
    CHECK(r.best_position.cwiseAbs().maxCoeff() <= 1.0);
}

TEST_CASE("nan fitness counts as +inf") {
    int calls = 0;
    const auto f = [&calls](const Eigen::VectorXd& x) {
        return ++calls % 3 == 0 ? std::nan("") : x.squaredNorm();
    };
    const auto r = pso_optimize(f, box(2, 1.0, 3, 6));
    CHECK(r.nan_evaluations == 6);
    CHECK(std::isfinite(r.best_fitness));
    std::size_t infinite = 0;
    for (const auto& h : r.history) infinite += std::isinf(h.fitness) ? 1 : 0;
    CHECK(infinite == 6);
}

TEST_CASE("determinism and threading") {
    PsoConfig c = box(3, 2.0, 5, 12, 77);
    c.stochastic = true;
    const auto a = pso_optimize(sphere, c), b = pso_optimize(sphere, c);
    c.threads = 3;
    const auto t = pso_optimize(sphere, c);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i].position == b.history[i].position);
        CHECK(a.history[i].position == t.history[i].position);
    }
}

TEST_CASE("config validation") {
    PsoConfig c;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.bounds = {{1.0, 0.0}};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.bounds = {{0.0, 1.0}};
    c.n_particles = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.n_particles = 3;
    c.c_g = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("tuning a tiny 1D CNN") {
    // windows of a damped cosine; fitness is the validation MSE after a short training run
    data::Dataset all;
    all.window_length = 12;
    for (int traj = 0; traj < 6; ++traj) {
        std::vector<double> v;
        for (int i = 0; i < 60; ++i) v.push_back(std::exp(-0.03 * i) * std::cos((0.2 + 0.05 * traj) * i));
        for (int o = 0; o + 12 < 60; ++o) {
            data::SlicedSample s;
            s.input.assign(v.begin() + o, v.begin() + o + 12);
            s.label = v[static_cast<std::size_t>(o + 12)];
            s.grid_id = static_cast<std::size_t>(traj);
            all.samples.push_back(s);
        }
    }
    const auto [tr, va] = data::split_subtrain(all, 0.8, 1);
    std::vector<std::pair<Eigen::VectorXd, double>> log;
    const auto objective = [&](const Eigen::VectorXd& x) {
        const int k1 = static_cast<int>(std::lround(x(0))), s1 = static_cast<int>(std::lround(x(1)));
        const int k2 = static_cast<int>(std::lround(x(2))), s2 = static_cast<int>(std::lround(x(3)));
        nn::NetSpec spec;
        spec.input_length = 12;
        spec.layers = {nn::LayerSpec::conv1d(k1, s1), nn::LayerSpec::conv1d(k2, s2), nn::LayerSpec::maxpool1d(2, 2),
                       nn::LayerSpec::flatten(), nn::LayerSpec::dense(8), nn::LayerSpec::dense(1, nn::Activation::linear)};
        double fit = std::numeric_limits<double>::infinity();
        try {
            nn::TrainOpts o;
            o.learning_rate = 3e-3;
            o.batch_size = 16;
            o.epochs = 3;
            fit = nn::train(nn::build_model(spec, 1), tr, &va, o).history.epochs.back().val_mse;
        } catch (const ConfigError&) {
        }
        log.emplace_back(x, fit);
        return fit;
    };
    PsoConfig c;
    c.bounds = {{1, 6}, {2, 5}, {1, 6}, {2, 4}};
    c.limits = {{0.5, 8}, {1.5, 5.4}, {0.5, 8}, {1.5, 4.4}};
    c.n_generations = 4;
    c.seed = 2;
    const auto r = pso_optimize(objective, c);
    REQUIRE(log.size() == 12);
    for (const auto& [x, f] : log) CHECK(r.best_fitness <= f);
    check_monotone(r);

    const auto dir = std::filesystem::temp_directory_path() / "qdbench_pso_test";
    write_history_csv(r, dir / "h.csv");
    std::ifstream in(dir / "h.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "generation,particle,fitness,best_fitness,x_1,x_2,x_3,x_4");
    std::filesystem::remove_all(dir);
}
