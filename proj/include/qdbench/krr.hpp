// Kernel ridge regression on fixed-length windows.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qdbench/datapipe.hpp"

namespace qdbench::krr {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class KernelFamily { linear, gaussian, exponential, matern, decaying_periodic };
std::string to_string(KernelFamily f);
KernelFamily parse_family(const std::string& name);

struct KernelSpec {
    KernelFamily family{KernelFamily::gaussian};
    double sigma{1.0};     // unused by linear
    int n{0};              // matern order
    double period{1.0};    // decaying_periodic
    double sigma_p{1.0};   // decaying_periodic

    void validate() const;

    static KernelSpec linear() { return {KernelFamily::linear}; }
    static KernelSpec gaussian(double s) { return {KernelFamily::gaussian, s}; }
    static KernelSpec exponential(double s) { return {KernelFamily::exponential, s}; }
    static KernelSpec matern(double s, int order) { return {KernelFamily::matern, s, order}; }
    static KernelSpec decaying_periodic(double s, double p, double sp) {
        return {KernelFamily::decaying_periodic, s, 0, p, sp};
    }
};

double kernel_eval(const KernelSpec& spec, std::span<const double> a, std::span<const double> b);

// Kernel value as a function of the Euclidean distance (not valid for linear).
double kernel_from_distance(const KernelSpec& spec, double d);

RowMatrix kernel_matrix(const KernelSpec& spec, const RowMatrix& x);
RowMatrix kernel_matrix(const KernelSpec& spec, const RowMatrix& a, const RowMatrix& b);

struct SolveInfo {
    double jitter{0.0};          // diagonal shift finally used (0 when none was needed)
    int refinements{0};
    double relative_residual{0.0};  // ||(K + lambda I) alpha - y||_inf / ||y||_inf
};

// Solves (K + lambda I) alpha = y by Cholesky. On factorisation failure a jitter of
// 1e-10 * mean(diag), escalated tenfold up to three times, is added and the original
// system is restored by iterative refinement. Throws NumericalError with a condition
// estimate when no attempt reaches a relative residual of 1e-8.
Eigen::VectorXd solve_regularized(const RowMatrix& k, double lambda, const Eigen::VectorXd& y,
                                  SolveInfo* info = nullptr);

struct KrrModel {
    KernelSpec spec;
    double lambda_reg{0.0};
    Eigen::VectorXd alphas;
    RowMatrix training_inputs;  // N x T

    std::size_t window_length() const { return static_cast<std::size_t>(training_inputs.cols()); }
    std::size_t size() const { return static_cast<std::size_t>(alphas.size()); }
};

// Dataset inputs as an N x T matrix and labels as a vector.
RowMatrix inputs_matrix(const data::Dataset& d);
Eigen::VectorXd labels_vector(const data::Dataset& d);

KrrModel krr_train(const RowMatrix& x, const Eigen::VectorXd& y, const KernelSpec& spec, double lambda_reg,
                   SolveInfo* info = nullptr);

// Training sets larger than max_samples are cut down by seeded subsampling.
KrrModel krr_train(const data::Dataset& data, const KernelSpec& spec, double lambda_reg,
                   std::size_t max_samples = 6000, std::uint64_t seed = 0, SolveInfo* info = nullptr);

double krr_predict(const KrrModel& model, std::span<const double> x);
Eigen::VectorXd krr_predict(const KrrModel& model, const RowMatrix& x);

// beta_s = sum_i alpha_i x_is; linear kernel only.
Eigen::VectorXd extract_ridge_coefficients(const KrrModel& model);

struct SearchGrid {
    std::vector<double> sigmas;
    std::vector<double> lambdas;
    // decaying_periodic: random draws instead of a grid
    int random_budget{128};
    double sigma_min{std::ldexp(1.0, -5)}, sigma_max{std::ldexp(1.0, 15)};
    double lambda_min{std::ldexp(1.0, -35)}, lambda_max{std::ldexp(1.0, -5)};
    double period_min{0.1}, period_max{20.0};

    // sigma in 2^-5..2^15, lambda in 2^-35..2^-5 (powers of two; `stride` skips exponents)
    static SearchGrid log2_default(int stride = 1);
};

struct SearchCandidate {
    KernelSpec spec;
    double lambda_reg{0.0};
    double validation_mae{0.0};  // +inf when the solve failed
};

struct SearchResult {
    KernelSpec spec;
    double lambda_reg{0.0};
    double validation_mae{0.0};
    std::vector<SearchCandidate> evaluated;
};

// Minimises single-step validation MAE. `base` fixes the family (and the Matern order).
// Ties go to the smaller sigma, then the smaller lambda.
SearchResult hyperparameter_search(const data::Dataset& train, const data::Dataset& validation,
                                   const KernelSpec& base, const SearchGrid& grid, std::uint64_t seed);

// One JSON header line followed by CSV rows "alpha,x_1,...,x_T" (17 significant digits).
void save_model(const KrrModel& model, const std::filesystem::path& path);
KrrModel load_model(const std::filesystem::path& path);

}  // namespace qdbench::krr
