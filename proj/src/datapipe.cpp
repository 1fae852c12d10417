#include "qdbench/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "qdbench/errors.hpp"

namespace qdbench::data {

void GridSpec::validate() const {
    if (epsilon_values.empty() || lambda_values.empty() || omega_c_values.empty() || beta_values.empty())
        throw ConfigError("grid spec: every parameter list must be non-empty");
}

std::size_t GridSpec::size() const {
    return epsilon_values.size() * lambda_values.size() * omega_c_values.size() * beta_values.size();
}

GridSpec GridSpec::full() {
    GridSpec g;
    g.epsilon_values = {0.0, 1.0};
    for (int i = 1; i <= 10; ++i) g.lambda_values.push_back(0.1 * i);
    for (int i = 1; i <= 10; ++i) g.omega_c_values.push_back(i);
    g.beta_values = {0.1, 0.25, 0.5, 0.75, 1.0};
    return g;
}

GridSpec GridSpec::symmetric() {
    auto g = full();
    g.epsilon_values = {0.0};
    return g;
}

GridSpec GridSpec::asymmetric() {
    auto g = full();
    g.epsilon_values = {1.0};
    return g;
}

std::vector<refdyn::SpinBosonParams> parameter_grid(const GridSpec& spec) {
    spec.validate();
    std::vector<refdyn::SpinBosonParams> out;
    out.reserve(spec.size());
    for (double eps : spec.epsilon_values)
        for (double lam : spec.lambda_values)
            for (double wc : spec.omega_c_values)
                for (double beta : spec.beta_values) out.push_back({eps, 1.0, lam, wc, beta});
    return out;
}

std::string to_string(SplitTag tag) {
    switch (tag) {
        case SplitTag::train: return "train";
        case SplitTag::subtrain: return "subtrain";
        case SplitTag::validation: return "validation";
        case SplitTag::holdout: return "holdout";
    }
    return "unknown";
}

std::vector<SlicedSample> slice_trajectory(const refdyn::Trajectory& traj, std::size_t slice_length,
                                           std::size_t grid_id) {
    const std::size_t n = traj.values.size();
    if (slice_length < 2) throw ConfigError("slice length must be at least 2");
    if (n < slice_length) {
        std::ostringstream msg;
        msg << "trajectory length " << n << " is shorter than slice length " << slice_length;
        throw ConfigError(msg.str());
    }
    std::vector<SlicedSample> out;
    out.reserve(n - slice_length + 1);
    for (std::size_t j = 0; j + slice_length <= n; ++j) {
        SlicedSample s;
        s.input.assign(traj.values.begin() + static_cast<std::ptrdiff_t>(j),
                       traj.values.begin() + static_cast<std::ptrdiff_t>(j + slice_length - 1));
        s.label = traj.values[j + slice_length - 1];
        s.grid_id = grid_id;
        s.offset = j;
        out.push_back(std::move(s));
    }
    return out;
}

HoldoutSplit holdout_select(std::size_t count, std::size_t n, std::uint64_t seed) {
    if (n > count) {
        std::ostringstream msg;
        msg << "holdout size " << n << " exceeds trajectory count " << count;
        throw ConfigError(msg.str());
    }
    std::vector<std::size_t> ids(count);
    std::iota(ids.begin(), ids.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    HoldoutSplit split;
    split.holdout.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n));
    split.remaining.assign(ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end());
    std::sort(split.holdout.begin(), split.holdout.end());
    std::sort(split.remaining.begin(), split.remaining.end());
    return split;
}

std::pair<Dataset, Dataset> split_subtrain(const Dataset& train, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
    if (train.empty()) throw ConfigError("cannot split an empty dataset");
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_sub = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(train.size())));

    Dataset sub{{}, train.window_length, SplitTag::subtrain};
    Dataset val{{}, train.window_length, SplitTag::validation};
    sub.samples.reserve(n_sub);
    val.samples.reserve(train.size() - n_sub);
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_sub ? sub : val).samples.push_back(train.samples[order[i]]);
    return {std::move(sub), std::move(val)};
}

Dataset build_dataset(const std::vector<refdyn::Trajectory>& trajectories, std::size_t slice_length,
                      std::uint64_t seed, const std::vector<std::size_t>& grid_ids) {
    if (!grid_ids.empty() && grid_ids.size() != trajectories.size())
        throw ConfigError("grid id list does not match the trajectory count");
    Dataset ds{{}, slice_length - 1, SplitTag::train};
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        auto slices = slice_trajectory(trajectories[i], slice_length, grid_ids.empty() ? i : grid_ids[i]);
        std::move(slices.begin(), slices.end(), std::back_inserter(ds.samples));
    }
    std::mt19937_64 rng(seed);
    std::shuffle(ds.samples.begin(), ds.samples.end(), rng);
    return ds;
}

Dataset subsample(const Dataset& data, std::size_t n, std::uint64_t seed) {
    if (n >= data.size()) return data;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(n);
    std::sort(order.begin(), order.end());
    Dataset out{{}, data.window_length, data.split};
    out.samples.reserve(n);
    for (auto i : order) out.samples.push_back(data.samples[i]);
    return out;
}

void write_dataset_csv(const Dataset& data, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw MissingInputError("cannot write " + path.string());
    os << "grid_id,offset";
    for (std::size_t i = 1; i <= data.window_length; ++i) os << ",x_" << i;
    os << ",y\n" << std::setprecision(17);
    for (const auto& s : data.samples) {
        os << s.grid_id << ',' << s.offset;
        for (double x : s.input) os << ',' << x;
        os << ',' << s.label << '\n';
    }
}

Dataset read_dataset_csv(const std::filesystem::path& path, SplitTag split) {
    std::ifstream is(path);
    if (!is) throw MissingInputError("missing dataset file " + path.string());
    std::string line;
    if (!std::getline(is, line) || line.rfind("grid_id,offset", 0) != 0)
        throw ConfigError(path.string() + ": expected a 'grid_id,offset,...' header");
    const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (columns < 4) throw ConfigError(path.string() + ": header has no input columns");
    Dataset ds{{}, columns - 3, split};
    std::size_t row = 1;
    while (std::getline(is, line)) {
        ++row;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
        if (cells.size() != columns) {
            std::ostringstream msg;
            msg << path.string() << ": row " << row << " has " << cells.size() << " columns, expected " << columns;
            throw ConfigError(msg.str());
        }
        SlicedSample s;
        s.grid_id = std::stoull(cells[0]);
        s.offset = std::stoull(cells[1]);
        s.input.reserve(ds.window_length);
        for (std::size_t i = 2; i + 1 < columns; ++i) s.input.push_back(std::stod(cells[i]));
        s.label = std::stod(cells.back());
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

}  // namespace qdbench::data
