// Particle swarm optimisation.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace qdbench::pso {

struct Interval {
    double lo{0.0}, hi{1.0};
};

struct PsoConfig {
    int n_particles{3};
    int n_generations{50};
    double w{0.729};
    double c_p{1.49445};
    double c_g{1.49445};
    std::vector<Interval> bounds;  // initial sampling interval per dimension
    // Valid region; a coordinate leaving it is re-drawn uniformly from its initial interval.
    // Empty means the initial intervals themselves.
    std::vector<Interval> limits;
    // Initial velocities are uniform in +-velocity_scale * (hi - lo).
    double velocity_scale{0.1};
    // Multiply the cognitive and social terms by uniform(0,1) draws (classical PSO).
    bool stochastic{false};
    // Move with the updated velocity, x(t+1) = x(t) + v(t+1), instead of v(t).
    bool move_with_new_velocity{false};
    int threads{1};
    std::uint64_t seed{0};

    void validate() const;
    std::size_t dimensions() const { return bounds.size(); }
};

struct Particle {
    Eigen::VectorXd x, v, best_x;
    double fitness{0.0};
    double best_fitness{0.0};
};

struct Swarm {
    std::vector<Particle> particles;
    Eigen::VectorXd global_best;
    double global_best_fitness{0.0};
    int generation{0};
    std::mt19937_64 rng;
    std::size_t nan_evaluations{0};
};

// Returns the fitness to minimise. NaN is treated as +inf.
using Objective = std::function<double(const Eigen::VectorXd&)>;

// Draws positions and velocities and evaluates the first generation.
Swarm initialize_swarm(const Objective& f, const PsoConfig& cfg);

// One generation, synchronous:
//   v(t+1) = w v(t) + c_p (x_p(t) - x(t)) + c_g (x_g(t) - x(t))
//   x(t+1) = x(t) + v(t)
// followed by re-drawing invalid coordinates and evaluating the new positions.
void pso_step(Swarm& swarm, const Objective& f, const PsoConfig& cfg);

struct HistoryRow {
    int generation{0};
    int particle{0};
    double fitness{0.0};
    double best_fitness{0.0};  // swarm best after this evaluation
    Eigen::VectorXd position;
};

struct PsoResult {
    Eigen::VectorXd best_position;
    double best_fitness{0.0};
    std::vector<HistoryRow> history;  // n_generations * n_particles rows
    std::size_t nan_evaluations{0};
};

PsoResult pso_optimize(const Objective& f, const PsoConfig& cfg);

// generation,particle,fitness,best_fitness,x_1,...,x_D
void write_history_csv(const PsoResult& r, const std::filesystem::path& path);

}  // namespace qdbench::pso
