#include "qdbench/krr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "qdbench/errors.hpp"

namespace qdbench::krr {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

double binomial(int n, int k) {
    double r = 1.0;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

double factorial_ratio(int top, int bottom) {  // top! / bottom!
    double r = 1.0;
    if (top >= bottom)
        for (int i = bottom + 1; i <= top; ++i) r *= i;
    else
        for (int i = top + 1; i <= bottom; ++i) r /= i;
    return r;
}

// Pairwise Euclidean distances; d(i, i) = 0 exactly.
RowMatrix distances(const RowMatrix& a, const RowMatrix& b, bool symmetric) {
    RowMatrix d(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const Eigen::Index j0 = symmetric ? i : 0;
        for (Eigen::Index j = j0; j < b.rows(); ++j) {
            const double v = (a.row(i) - b.row(j)).norm();
            d(i, j) = v;
            if (symmetric) d(j, i) = v;
        }
    }
    return d;
}

RowMatrix apply_kernel(const KernelSpec& spec, const RowMatrix& dist) {
    return dist.unaryExpr([&](double d) { return kernel_from_distance(spec, d); });
}

double mae(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).cwiseAbs().mean();
}

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
    return std::exp(u(rng));
}

bool better(const SearchCandidate& a, const SearchCandidate& b) {
    if (a.validation_mae != b.validation_mae) return a.validation_mae < b.validation_mae;
    if (a.spec.sigma != b.spec.sigma) return a.spec.sigma < b.spec.sigma;
    return a.lambda_reg < b.lambda_reg;
}

}  // namespace

std::string to_string(KernelFamily f) {
    switch (f) {
        case KernelFamily::linear: return "linear";
        case KernelFamily::gaussian: return "gaussian";
        case KernelFamily::exponential: return "exponential";
        case KernelFamily::matern: return "matern";
        case KernelFamily::decaying_periodic: return "decaying_periodic";
    }
    return "unknown";
}

KernelFamily parse_family(const std::string& name) {
    for (auto f : {KernelFamily::linear, KernelFamily::gaussian, KernelFamily::exponential, KernelFamily::matern,
                   KernelFamily::decaying_periodic})
        if (to_string(f) == name) return f;
    throw ConfigError("unknown kernel family '" + name + "'");
}

void KernelSpec::validate() const {
    if (family == KernelFamily::linear) return;
    require(sigma > 0.0 && std::isfinite(sigma), "kernel sigma must be positive");
    if (family == KernelFamily::matern) require(n >= 0, "matern order must be non-negative");
    if (family == KernelFamily::decaying_periodic) {
        require(period > 0.0 && std::isfinite(period), "kernel period must be positive");
        require(sigma_p > 0.0, "kernel sigma_p must be positive");
    }
}

double kernel_from_distance(const KernelSpec& spec, double d) {
    switch (spec.family) {
        case KernelFamily::gaussian: return std::exp(-d * d / (2.0 * spec.sigma * spec.sigma));
        case KernelFamily::exponential: return std::exp(-d / spec.sigma);
        case KernelFamily::matern: {
            // exp(-d/s) sum_k (n+k)!/(2n)! C(n,k) (2d/s)^(n-k)
            const int n = spec.n;
            const double z = 2.0 * d / spec.sigma;
            double sum = 0.0;
            for (int k = 0; k <= n; ++k) sum += factorial_ratio(n + k, 2 * n) * binomial(n, k) * std::pow(z, n - k);
            return std::exp(-d / spec.sigma) * sum;
        }
        case KernelFamily::decaying_periodic: {
            const double s = std::sin(std::numbers::pi * d / spec.period);
            return std::exp(-d * d / (2.0 * spec.sigma * spec.sigma) - 2.0 * s * s / (spec.sigma_p * spec.sigma_p));
        }
        case KernelFamily::linear: break;
    }
    throw ConfigError("linear kernel is not a function of distance");
}

double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        std::ostringstream msg;
        msg << "kernel input lengths differ: " << a.size() << " vs " << b.size();
        throw ConfigError(msg.str());
    }
    double acc = 0.0;
    if (spec.family == KernelFamily::linear) {
        for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
        return acc;
    }
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return kernel_from_distance(spec, std::sqrt(acc));
}

RowMatrix kernel_matrix(const KernelSpec& spec, const RowMatrix& x) {
    spec.validate();
    if (spec.family == KernelFamily::linear) {
        RowMatrix k(x.rows(), x.rows());
        k.noalias() = x * x.transpose();
        return k;
    }
    return apply_kernel(spec, distances(x, x, true));
}

RowMatrix kernel_matrix(const KernelSpec& spec, const RowMatrix& a, const RowMatrix& b) {
    spec.validate();
    require(a.cols() == b.cols(), "kernel matrix: window lengths differ");
    if (spec.family == KernelFamily::linear) {
        RowMatrix k(a.rows(), b.rows());
        k.noalias() = a * b.transpose();
        return k;
    }
    return apply_kernel(spec, distances(a, b, false));
}

Eigen::VectorXd solve_regularized(const RowMatrix& k, double lambda, const Eigen::VectorXd& y, SolveInfo* info) {
    require(lambda >= 0.0, "regularisation must be non-negative");
    require(k.rows() == k.cols() && k.rows() == y.size(), "solve: shape mismatch");
    const Eigen::Index n = k.rows();
    Eigen::MatrixXd a = k;
    a.diagonal().array() += lambda;
    const double y_norm = std::max(y.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
    const double mean_diag = a.diagonal().mean();
    constexpr double target = 1e-8;

    double cond_estimate = HUGE_VAL;
    double best_residual = HUGE_VAL;
    for (int attempt = 0; attempt <= 3; ++attempt) {
        const double jitter = attempt == 0 ? 0.0 : 1e-10 * std::pow(10.0, attempt - 1) * mean_diag;
        Eigen::MatrixXd shifted = a;
        shifted.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(shifted);
        if (llt.info() != Eigen::Success) continue;
        const Eigen::VectorXd diag = llt.matrixLLT().diagonal();
        cond_estimate = std::pow(diag.maxCoeff() / diag.minCoeff(), 2);

        Eigen::VectorXd alpha = llt.solve(y);
        int refinements = 0;
        double residual = (y - a * alpha).cwiseAbs().maxCoeff() / y_norm;
        // Refinement against the unshifted matrix undoes the jitter.
        while (residual >= target && refinements < 30) {
            const Eigen::VectorXd next_alpha = alpha + llt.solve(y - a * alpha);
            const double next = (y - a * next_alpha).cwiseAbs().maxCoeff() / y_norm;
            if (!(next < residual)) break;
            alpha = next_alpha;
            residual = next;
            ++refinements;
        }
        best_residual = std::min(best_residual, residual);
        if (residual < target && alpha.allFinite()) {
            if (info) *info = SolveInfo{jitter, refinements, residual};
            return alpha;
        }
    }
    std::ostringstream msg;
    msg << "kernel system (N=" << n << ", lambda=" << lambda << ") could not be solved: ";
    if (std::isfinite(best_residual))
        msg << "best relative residual " << best_residual << ", ";
    else
        msg << "Cholesky failed for every jitter, ";
    msg << "condition estimate " << cond_estimate;
    throw NumericalError(msg.str());
}

RowMatrix inputs_matrix(const data::Dataset& d) {
    require(!d.empty(), "dataset is empty");
    RowMatrix x(static_cast<Eigen::Index>(d.size()), static_cast<Eigen::Index>(d.window_length));
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& in = d.samples[i].input;
        require(in.size() == d.window_length, "dataset window lengths are inconsistent");
        for (std::size_t j = 0; j < in.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = in[j];
    }
    return x;
}

Eigen::VectorXd labels_vector(const data::Dataset& d) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(d.size()));
    for (std::size_t i = 0; i < d.size(); ++i) y(static_cast<Eigen::Index>(i)) = d.samples[i].label;
    return y;
}

KrrModel krr_train(const RowMatrix& x, const Eigen::VectorXd& y, const KernelSpec& spec, double lambda_reg,
                   SolveInfo* info) {
    spec.validate();
    require(x.rows() >= 1, "KRR needs at least one training sample");
    require(x.rows() == y.size(), "KRR: inputs and labels differ in length");
    require(lambda_reg >= 0.0, "lambda_reg must be non-negative");
    KrrModel m;
    m.spec = spec;
    m.lambda_reg = lambda_reg;
    m.training_inputs = x;
    m.alphas = solve_regularized(kernel_matrix(spec, x), lambda_reg, y, info);
    return m;
}

KrrModel krr_train(const data::Dataset& data, const KernelSpec& spec, double lambda_reg, std::size_t max_samples,
                   std::uint64_t seed, SolveInfo* info) {
    const auto& used = data.size() > max_samples ? data::subsample(data, max_samples, seed) : data;
    return krr_train(inputs_matrix(used), labels_vector(used), spec, lambda_reg, info);
}

double krr_predict(const KrrModel& model, std::span<const double> x) {
    if (x.size() != model.window_length()) {
        std::ostringstream msg;
        msg << "window length " << x.size() << " does not match the model's " << model.window_length();
        throw ConfigError(msg.str());
    }
    double f = 0.0;
    for (Eigen::Index i = 0; i < model.training_inputs.rows(); ++i) {
        const auto row = model.training_inputs.row(i);
        f += model.alphas(i) * kernel_eval(model.spec, std::span<const double>(row.data(), x.size()), x);
    }
    return f;
}

Eigen::VectorXd krr_predict(const KrrModel& model, const RowMatrix& x) {
    require(static_cast<std::size_t>(x.cols()) == model.window_length(), "window length does not match the model");
    return kernel_matrix(model.spec, x, model.training_inputs) * model.alphas;
}

Eigen::VectorXd extract_ridge_coefficients(const KrrModel& model) {
    if (model.spec.family != KernelFamily::linear)
        throw ConfigError("ridge coefficients exist only for the linear kernel, not " + to_string(model.spec.family));
    return model.training_inputs.transpose() * model.alphas;
}

SearchGrid SearchGrid::log2_default(int stride) {
    require(stride >= 1, "grid stride must be positive");
    SearchGrid g;
    for (int e = -5; e <= 15; e += stride) g.sigmas.push_back(std::ldexp(1.0, e));
    for (int e = -35; e <= -5; e += stride) g.lambdas.push_back(std::ldexp(1.0, e));
    return g;
}

SearchResult hyperparameter_search(const data::Dataset& train, const data::Dataset& validation,
                                   const KernelSpec& base, const SearchGrid& grid, std::uint64_t seed) {
    require(!train.empty() && !validation.empty(), "hyperparameter search needs non-empty splits");
    const RowMatrix xt = inputs_matrix(train), xv = inputs_matrix(validation);
    const Eigen::VectorXd yt = labels_vector(train), yv = labels_vector(validation);
    require(xt.cols() == xv.cols(), "train and validation window lengths differ");

    SearchResult result;
    auto evaluate = [&](const KernelSpec& spec, const RowMatrix& k_train, const RowMatrix& k_val, double lambda) {
        SearchCandidate c{spec, lambda, HUGE_VAL};
        try {
            const Eigen::VectorXd alpha = solve_regularized(k_train, lambda, yt);
            const double m = mae(k_val * alpha, yv);
            if (std::isfinite(m)) c.validation_mae = m;
        } catch (const NumericalError&) {
        }
        result.evaluated.push_back(c);
    };

    if (base.family == KernelFamily::decaying_periodic) {
        require(grid.random_budget >= 1, "random search budget must be positive");
        const RowMatrix dt = distances(xt, xt, true), dv = distances(xv, xt, false);
        std::mt19937_64 rng(seed);
        for (int draw = 0; draw < grid.random_budget; ++draw) {
            KernelSpec s = base;
            s.sigma = log_uniform(rng, grid.sigma_min, grid.sigma_max);
            s.sigma_p = log_uniform(rng, grid.sigma_min, grid.sigma_max);
            s.period = log_uniform(rng, grid.period_min, grid.period_max);
            const double lambda = log_uniform(rng, grid.lambda_min, grid.lambda_max);
            evaluate(s, apply_kernel(s, dt), apply_kernel(s, dv), lambda);
        }
    } else {
        require(!grid.lambdas.empty(), "empty lambda grid");
        if (base.family == KernelFamily::linear) {
            const RowMatrix kt = kernel_matrix(base, xt), kv = kernel_matrix(base, xv, xt);
            for (double lambda : grid.lambdas) evaluate(base, kt, kv, lambda);
        } else {
            require(!grid.sigmas.empty(), "empty sigma grid");
            const RowMatrix dt = distances(xt, xt, true), dv = distances(xv, xt, false);
            for (double sigma : grid.sigmas) {
                KernelSpec s = base;
                s.sigma = sigma;
                const RowMatrix kt = apply_kernel(s, dt), kv = apply_kernel(s, dv);
                for (double lambda : grid.lambdas) evaluate(s, kt, kv, lambda);
            }
        }
    }

    const auto best = std::min_element(result.evaluated.begin(), result.evaluated.end(), better);
    if (!std::isfinite(best->validation_mae)) throw NumericalError("hyperparameter search: every candidate failed");
    result.spec = best->spec;
    result.lambda_reg = best->lambda_reg;
    result.validation_mae = best->validation_mae;
    return result;
}

void save_model(const KrrModel& model, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw MissingInputError("cannot write " + path.string());
    nlohmann::json h;
    h["family"] = to_string(model.spec.family);
    h["sigma"] = model.spec.sigma;
    h["n"] = model.spec.n;
    h["period"] = model.spec.period;
    h["sigma_p"] = model.spec.sigma_p;
    h["lambda"] = model.lambda_reg;
    h["N"] = model.size();
    h["T"] = model.window_length();
    os << h.dump() << '\n' << std::setprecision(17);
    for (Eigen::Index i = 0; i < model.alphas.size(); ++i) {
        os << model.alphas(i);
        for (Eigen::Index j = 0; j < model.training_inputs.cols(); ++j) os << ',' << model.training_inputs(i, j);
        os << '\n';
    }
}

KrrModel load_model(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingInputError("missing KRR model file " + path.string());
    std::string line;
    std::getline(is, line);
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": bad model header: " + e.what());
    }
    KrrModel m;
    m.spec.family = parse_family(h.at("family").get<std::string>());
    m.spec.sigma = h.at("sigma").get<double>();
    m.spec.n = h.at("n").get<int>();
    m.spec.period = h.at("period").get<double>();
    m.spec.sigma_p = h.at("sigma_p").get<double>();
    m.lambda_reg = h.at("lambda").get<double>();
    const auto n = h.at("N").get<Eigen::Index>();
    const auto t = h.at("T").get<Eigen::Index>();
    m.alphas.resize(n);
    m.training_inputs.resize(n, t);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (!std::getline(is, line)) throw ConfigError(path.string() + ": truncated model payload");
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        m.alphas(i) = std::stod(cell);
        for (Eigen::Index j = 0; j < t; ++j) {
            if (!std::getline(ss, cell, ',')) throw ConfigError(path.string() + ": short model row");
            m.training_inputs(i, j) = std::stod(cell);
        }
    }
    return m;
}

}  // namespace qdbench::krr
