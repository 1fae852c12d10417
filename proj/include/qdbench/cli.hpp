// Configuration-driven command-line front end.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "qdbench/datapipe.hpp"
#include "qdbench/krr.hpp"
#include "qdbench/nnet.hpp"
#include "qdbench/pso.hpp"
#include "qdbench/refdyn.hpp"

namespace qdbench::cli {

// Exit statuses.
inline constexpr int exit_ok = 0;
inline constexpr int exit_config = 1;
inline constexpr int exit_numerical = 2;
inline constexpr int exit_missing = 3;

// Default run directory is $QDBENCH_OUTPUT_ROOT/default, or runs/default when unset.
inline constexpr const char* output_root_env = "QDBENCH_OUTPUT_ROOT";

// krr-l, krr-g, krr-dp, krr-e, krr-m1..m4, then the 14 network ids.
const std::vector<std::string>& model_ids();
bool is_krr(const std::string& id);
// Kernel family (and Matern order) of a krr-* id.
krr::KernelSpec kernel_of(const std::string& id);

struct DatasetOptions {
    std::size_t slice_length{42};
    std::size_t holdout{0};  // 0: a tenth of the trajectories
    double subtrain_fraction{0.8};
};

struct KrrOptions {
    std::size_t max_samples{4000};
    std::size_t search_samples{1000};
    std::size_t search_validation_samples{1000};
    int grid_stride{1};
    int random_budget{128};
};

struct NnOptions {
    nn::TrainOpts train;
    std::size_t max_samples{0};         // 0: all sub-training samples
    std::size_t validation_samples{0};  // 0: all validation samples
};

// PSO over the 1D CNN convolution sizes (kernels and kernel size of both layers).
struct CnnSearchOptions {
    pso::PsoConfig pso;  // bounds are filled from the two ranges below
    double kernels_lo{16}, kernels_hi{256};
    double size_lo{2}, size_hi{16};
    int epochs{30};
    int batch_size{64};
    std::size_t max_samples{0};
};

struct BenchmarkOptions {
    int timing_repeats{5};
    std::size_t timing_trajectories{0};
};

struct RunConfig {
    std::uint64_t seed{0};
    int threads{1};
    std::string out;
    std::string grid_name{"full"};
    data::GridSpec grid;
    std::size_t grid_subset{0};  // 0: every grid point, else a seeded subset
    refdyn::HierarchyConfig hierarchy;
    DatasetOptions dataset;
    std::vector<std::string> models;
    nlohmann::json model_options = nlohmann::json::object();
    KrrOptions krr;
    NnOptions nn;
    CnnSearchOptions cnn_search;
    BenchmarkOptions benchmark;
    nlohmann::json source;  // effective JSON the fields were read from

    // Throws ConfigError naming the offending field.
    static RunConfig from_json(const nlohmann::json& j);
    std::string hash() const;  // SHA-256 of the effective JSON
};

// Every field with its default value.
nlohmann::json default_config();

// Applies "a.b.c=value" (value parsed as JSON, else taken as a string).
void apply_override(nlohmann::json& config, const std::string& assignment);

// Seeds of the stochastic stages, derived from the run seed.
struct StageSeeds {
    std::uint64_t holdout, shuffle, split, grid_subset, krr_subsample, krr_search, nn_init, nn_train, pso;
    explicit StageSeeds(std::uint64_t base);
    nlohmann::json to_json() const;
};

std::string sha256_hex(const std::filesystem::path& file);
std::string sha256_hex_string(const std::string& data);

// Records one stage in <run>/manifest.json: config hash, seeds, artifacts with checksums.
// Artifacts listed by a previous run of the same stage are replaced.
void update_manifest(const std::filesystem::path& run_dir, const std::string& stage, const RunConfig& cfg,
                     const std::vector<std::filesystem::path>& artifacts, const nlohmann::json& info = {});

// Trajectories of a directory, ordered by its grid.csv when present, else by file name.
std::vector<refdyn::Trajectory> read_trajectory_dir(const std::filesystem::path& dir);

// argv[0] is the program name. Never throws; errors are reported on `err`.
int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qdbench::cli
