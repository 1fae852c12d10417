#include "qdbench/pso.hpp"

#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <limits>

#include "qdbench/errors.hpp"

namespace qdbench::pso {

namespace {

double sanitize(double v) { return std::isnan(v) ? std::numeric_limits<double>::infinity() : v; }

// Evaluates every particle position; NaN fitness becomes +inf.
std::vector<double> evaluate_all(const std::vector<Particle>& ps, const Objective& f, int threads, std::size_t& nans) {
    std::vector<double> out(ps.size());
    if (threads <= 1) {
        for (std::size_t i = 0; i < ps.size(); ++i) out[i] = f(ps[i].x);
    } else {
        std::vector<std::future<double>> jobs;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            if (jobs.size() == static_cast<std::size_t>(threads)) {
                for (std::size_t j = 0; j < jobs.size(); ++j) out[i - jobs.size() + j] = jobs[j].get();
                jobs.clear();
            }
            jobs.push_back(std::async(std::launch::async, [&f, &ps, i] { return f(ps[i].x); }));
        }
        for (std::size_t j = 0; j < jobs.size(); ++j) out[ps.size() - jobs.size() + j] = jobs[j].get();
    }
    for (double& v : out) {
        if (std::isnan(v)) ++nans;
        v = sanitize(v);
    }
    return out;
}

const Interval& limit(const PsoConfig& cfg, std::size_t d) {
    return cfg.limits.empty() ? cfg.bounds[d] : cfg.limits[d];
}

}  // namespace

void PsoConfig::validate() const {
    if (n_particles < 1) throw ConfigError("pso n_particles must be at least 1");
    if (n_generations < 1) throw ConfigError("pso n_generations must be at least 1");
    if (w < 0 || c_p < 0 || c_g < 0) throw ConfigError("pso coefficients must be non-negative");
    if (bounds.empty()) throw ConfigError("pso bounds are empty");
    for (const auto& b : bounds)
        if (!(b.lo < b.hi)) throw ConfigError("pso bounds need lo < hi in every dimension");
    if (!limits.empty()) {
        if (limits.size() != bounds.size()) throw ConfigError("pso limits and bounds differ in dimension");
        for (std::size_t d = 0; d < bounds.size(); ++d)
            if (bounds[d].lo < limits[d].lo || bounds[d].hi > limits[d].hi)
                throw ConfigError("pso initial interval must lie inside its limits");
    }
    if (velocity_scale < 0) throw ConfigError("pso velocity_scale must be non-negative");
}

Swarm initialize_swarm(const Objective& f, const PsoConfig& cfg) {
    cfg.validate();
    Swarm s;
    s.rng.seed(cfg.seed);
    const auto dims = static_cast<Eigen::Index>(cfg.dimensions());
    for (int i = 0; i < cfg.n_particles; ++i) {
        Particle p;
        p.x.resize(dims);
        p.v.resize(dims);
        for (Eigen::Index d = 0; d < dims; ++d) {
            const Interval& b = cfg.bounds[static_cast<std::size_t>(d)];
            p.x(d) = std::uniform_real_distribution<double>(b.lo, b.hi)(s.rng);
            const double span = cfg.velocity_scale * (b.hi - b.lo);
            p.v(d) = span > 0 ? std::uniform_real_distribution<double>(-span, span)(s.rng) : 0.0;
        }
        s.particles.push_back(std::move(p));
    }
    const auto fit = evaluate_all(s.particles, f, cfg.threads, s.nan_evaluations);
    s.global_best_fitness = std::numeric_limits<double>::infinity();
    s.global_best = s.particles.front().x;
    for (std::size_t i = 0; i < s.particles.size(); ++i) {
        Particle& p = s.particles[i];
        p.fitness = p.best_fitness = fit[i];
        p.best_x = p.x;
        if (fit[i] < s.global_best_fitness) {
            s.global_best_fitness = fit[i];
            s.global_best = p.x;
        }
    }
    s.generation = 1;
    return s;
}

void pso_step(Swarm& s, const Objective& f, const PsoConfig& cfg) {
    const Eigen::VectorXd g = s.global_best;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (Particle& p : s.particles) {
        Eigen::VectorXd cog = p.best_x - p.x, soc = g - p.x;
        if (cfg.stochastic) {
            for (Eigen::Index d = 0; d < cog.size(); ++d) cog(d) *= unit(s.rng);
            for (Eigen::Index d = 0; d < soc.size(); ++d) soc(d) *= unit(s.rng);
        }
        const Eigen::VectorXd v_next = cfg.w * p.v + cfg.c_p * cog + cfg.c_g * soc;
        p.x += cfg.move_with_new_velocity ? v_next : p.v;
        p.v = v_next;
        for (Eigen::Index d = 0; d < p.x.size(); ++d) {
            const Interval& lim = limit(cfg, static_cast<std::size_t>(d));
            if (p.x(d) < lim.lo || p.x(d) > lim.hi) {
                const Interval& b = cfg.bounds[static_cast<std::size_t>(d)];
                p.x(d) = std::uniform_real_distribution<double>(b.lo, b.hi)(s.rng);
            }
        }
    }
    const auto fit = evaluate_all(s.particles, f, cfg.threads, s.nan_evaluations);
    for (std::size_t i = 0; i < s.particles.size(); ++i) {
        Particle& p = s.particles[i];
        p.fitness = fit[i];
        if (fit[i] < p.best_fitness) {
            p.best_fitness = fit[i];
            p.best_x = p.x;
        }
        if (fit[i] < s.global_best_fitness) {
            s.global_best_fitness = fit[i];
            s.global_best = p.x;
        }
    }
    ++s.generation;
}

PsoResult pso_optimize(const Objective& f, const PsoConfig& cfg) {
    PsoResult r;
    double running = std::numeric_limits<double>::infinity();
    const auto log = [&](const Swarm& s) {
        for (std::size_t i = 0; i < s.particles.size(); ++i) {
            running = std::min(running, s.particles[i].fitness);
            r.history.push_back({s.generation, static_cast<int>(i), s.particles[i].fitness, running, s.particles[i].x});
        }
    };
    Swarm s = initialize_swarm(f, cfg);
    log(s);
    while (s.generation < cfg.n_generations) {
        pso_step(s, f, cfg);
        log(s);
    }
    r.best_position = s.global_best;
    r.best_fitness = s.global_best_fitness;
    r.nan_evaluations = s.nan_evaluations;
    return r;
}

void write_history_csv(const PsoResult& r, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot write " + path.string());
    f << "generation,particle,fitness,best_fitness";
    const Eigen::Index dims = r.history.empty() ? 0 : r.history.front().position.size();
    for (Eigen::Index d = 0; d < dims; ++d) f << ",x_" << d + 1;
    f << '\n' << std::setprecision(17);
    for (const auto& h : r.history) {
        f << h.generation << ',' << h.particle << ',' << h.fitness << ',' << h.best_fitness;
        for (Eigen::Index d = 0; d < h.position.size(); ++d) f << ',' << h.position(d);
        f << '\n';
    }
}

}  // namespace qdbench::pso
