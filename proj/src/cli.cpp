#include "qdbench/cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "qdbench/errors.hpp"
#include "qdbench/forecast.hpp"

namespace qdbench::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string seconds_text(double s) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(1) << s;
    return o.str();
}

struct Options {
    std::string config_path;
    std::string in, out, holdout;
    std::vector<std::string> sets;
    std::optional<long long> seed;
    std::optional<int> threads;
    std::string grid;
    std::optional<long long> points;
    bool resume{false};
    bool skip_failed{false};
    std::optional<long long> window;
    std::optional<long long> n_holdout;
    std::string models;
    std::optional<long long> epochs, batch, max_samples;
    std::optional<double> lr;
};

struct Context {
    RunConfig cfg;
    StageSeeds seeds{0};
    fs::path in, out;
    Options opt;
    std::ostream& log;
};

fs::path default_run_dir() {
    const char* root = std::getenv(output_root_env);
    return fs::path(root && *root ? root : "runs") / "default";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

json read_json_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw MissingInputError("cannot read " + p.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

void write_json_file(const fs::path& p, const json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw MissingInputError("cannot write " + p.string());
    out << j.dump(1) << '\n';
}

Context make_context(const Options& o, std::ostream& log) {
    json user = o.config_path.empty() ? json::object() : read_json_file(o.config_path);
    for (const auto& s : o.sets) apply_override(user, s);
    if (o.seed) user["seed"] = *o.seed;
    if (o.threads) user["threads"] = *o.threads;
    if (!o.out.empty()) user["out"] = o.out;
    if (!o.grid.empty()) user["grid"] = o.grid;
    if (o.points) user["grid_subset"] = *o.points;
    if (o.window) user["dataset"]["slice_length"] = *o.window + 1;
    if (o.n_holdout) user["dataset"]["holdout"] = *o.n_holdout;
    if (!o.models.empty()) user["models"] = split_list(o.models);
    if (o.epochs) user["nn"]["epochs"] = *o.epochs;
    if (o.batch) user["nn"]["batch_size"] = *o.batch;
    if (o.lr) user["nn"]["learning_rate"] = *o.lr;
    if (o.max_samples) {
        user["nn"]["max_samples"] = *o.max_samples;
        user["krr"]["max_samples"] = *o.max_samples;
    }
    Context c{RunConfig::from_json(user), StageSeeds(0), {}, {}, o, log};
    c.seeds = StageSeeds(c.cfg.seed);
    if (!o.in.empty()) c.in = o.in;
    else if (!c.cfg.out.empty()) c.in = c.cfg.out;
    else if (!o.holdout.empty()) c.in = fs::path(o.holdout).parent_path();
    else c.in = default_run_dir();
    c.out = c.cfg.out.empty() ? c.in : fs::path(c.cfg.out);
    return c;
}

// Rethrows with a prefix, keeping the error category.
[[noreturn]] void rethrow_with(std::exception_ptr ep, const std::string& prefix) {
    try {
        std::rethrow_exception(ep);
    } catch (const ConfigError& e) {
        throw ConfigError(prefix + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(prefix + e.what());
    } catch (const MissingInputError& e) {
        throw MissingInputError(prefix + e.what());
    } catch (const std::exception& e) {
        throw std::runtime_error(prefix + e.what());
    }
}

std::string grid_header() { return "grid_id,file,epsilon,lambda,omega_c,beta"; }

void write_grid_index(const fs::path& path, const std::vector<std::size_t>& ids,
                      const std::vector<refdyn::SpinBosonParams>& params) {
    std::ofstream f(path);
    if (!f) throw MissingInputError("cannot write " + path.string());
    f << grid_header() << '\n' << std::setprecision(17);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& p = params[i];
        f << ids[i] << ',' << refdyn::trajectory_filename(p) << ',' << p.epsilon << ',' << p.lambda << ','
          << p.omega_c << ',' << p.beta << '\n';
    }
}

// Grid ids from grid.csv, or positions when the directory has no index.
std::vector<std::size_t> read_grid_ids(const fs::path& dir, std::size_t count) {
    std::vector<std::size_t> ids;
    std::ifstream in(dir / "grid.csv");
    if (!in) {
        for (std::size_t i = 0; i < count; ++i) ids.push_back(i);
        return ids;
    }
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
        if (!line.empty()) ids.push_back(std::stoul(line.substr(0, line.find(','))));
    return ids;
}

// ---------------------------------------------------------------- generate

int cmd_generate(Context& c) {
    const auto all = data::parameter_grid(c.cfg.grid);
    std::vector<std::size_t> ids(all.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    if (c.cfg.grid_subset && c.cfg.grid_subset < ids.size()) {
        std::mt19937_64 rng(c.seeds.grid_subset);
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(c.cfg.grid_subset);
        std::sort(ids.begin(), ids.end());
    }
    std::vector<refdyn::SpinBosonParams> params;
    for (auto i : ids) params.push_back(all[i]);

    const fs::path dir = c.out / "trajectories";
    if (!c.opt.resume) fs::remove_all(dir);
    fs::create_directories(dir);

    std::vector<std::exception_ptr> errors(params.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    std::size_t done = 0;
    const auto worker = [&] {
        for (std::size_t k = next++; k < params.size(); k = next++) {
            const auto path = dir / refdyn::trajectory_filename(params[k]);
            try {
                if (c.opt.resume && fs::exists(path)) continue;
                const auto t0 = Clock::now();
                refdyn::ConvergenceReport rep;
                const auto traj = refdyn::heom_propagate(params[k], c.cfg.hierarchy, &rep);
                refdyn::write_trajectory_csv(traj, path.string() + ".tmp");
                fs::rename(path.string() + ".tmp", path);
                std::lock_guard<std::mutex> lock(log_mutex);
                c.log << "[" << ++done << "/" << params.size() << "] " << path.filename().string() << " depth "
                      << rep.depth << " poles " << rep.n_matsubara << " residual " << rep.residual << " ("
                      << seconds_text(seconds_since(t0)) << " s)" << std::endl;
            } catch (...) {
                errors[k] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(c.cfg.threads, static_cast<int>(params.size())));
    std::vector<std::thread> pool;
    for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    std::vector<std::size_t> kept_ids;
    std::vector<refdyn::SpinBosonParams> kept;
    json failed = json::array();
    for (std::size_t k = 0; k < params.size(); ++k) {
        const std::string where = "generate: grid point " + std::to_string(ids[k]) + " (" +
                                  refdyn::trajectory_filename(params[k]) + "): ";
        if (!errors[k]) {
            kept_ids.push_back(ids[k]);
            kept.push_back(params[k]);
            continue;
        }
        if (!c.opt.skip_failed) rethrow_with(errors[k], where);
        try {
            std::rethrow_exception(errors[k]);
        } catch (const NumericalError& e) {
            c.log << where << "skipped: " << e.what() << '\n';
            failed.push_back({{"grid_id", ids[k]}, {"file", refdyn::trajectory_filename(params[k])}, {"error", e.what()}});
        }
    }
    if (kept.empty()) throw NumericalError("generate: no grid point converged");

    write_grid_index(dir / "grid.csv", kept_ids, kept);
    std::vector<fs::path> artifacts{dir / "grid.csv"};
    for (const auto& p : kept) artifacts.push_back(dir / refdyn::trajectory_filename(p));
    update_manifest(c.out, "generate", c.cfg, artifacts,
                    {{"grid", c.cfg.grid_name}, {"points", kept.size()}, {"grid_size", all.size()}, {"failed", failed}});
    c.log << "generated " << kept.size() << " trajectories in " << dir.string();
    if (!failed.empty()) c.log << " (" << failed.size() << " grid points skipped)";
    c.log << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------- slice

int cmd_slice(Context& c) {
    const fs::path src = c.in / "trajectories";
    const auto trajs = read_trajectory_dir(src);
    const auto ids = read_grid_ids(src, trajs.size());
    if (ids.size() != trajs.size()) throw ConfigError(src.string() + "/grid.csv does not match the trajectory files");
    if (trajs.size() < 2) throw ConfigError("slice needs at least two trajectories");
    const std::size_t n_hold = c.cfg.dataset.holdout
                                   ? c.cfg.dataset.holdout
                                   : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(trajs.size() / 10.0)));
    if (n_hold >= trajs.size())
        throw ConfigError("config field 'dataset.holdout': " + std::to_string(n_hold) + " of " +
                          std::to_string(trajs.size()) + " trajectories leaves nothing to train on");
    const auto split = data::holdout_select(trajs.size(), n_hold, c.seeds.holdout);

    const fs::path hold_dir = c.out / "holdout";
    fs::remove_all(hold_dir);
    fs::create_directories(hold_dir);
    std::vector<fs::path> artifacts;
    std::vector<std::size_t> hold_ids;
    std::vector<refdyn::SpinBosonParams> hold_params;
    for (auto k : split.holdout) {
        const auto path = hold_dir / refdyn::trajectory_filename(trajs[k].params);
        refdyn::write_trajectory_csv(trajs[k], path);
        artifacts.push_back(path);
        hold_ids.push_back(ids[k]);
        hold_params.push_back(trajs[k].params);
    }
    write_grid_index(hold_dir / "grid.csv", hold_ids, hold_params);
    artifacts.push_back(hold_dir / "grid.csv");

    std::vector<refdyn::Trajectory> train;
    std::vector<std::size_t> train_ids;
    for (auto k : split.remaining) {
        train.push_back(trajs[k]);
        train_ids.push_back(ids[k]);
    }
    const auto ds = data::build_dataset(train, c.cfg.dataset.slice_length, c.seeds.shuffle, train_ids);
    const auto [sub, val] = data::split_subtrain(ds, c.cfg.dataset.subtrain_fraction, c.seeds.split);
    const fs::path dd = c.out / "dataset";
    data::write_dataset_csv(ds, dd / "train.csv");
    data::write_dataset_csv(sub, dd / "subtrain.csv");
    data::write_dataset_csv(val, dd / "validation.csv");
    for (const char* f : {"train.csv", "subtrain.csv", "validation.csv"}) artifacts.push_back(dd / f);

    const json info = {{"trajectories", trajs.size()},     {"holdout", split.holdout.size()},
                       {"training_trajectories", train.size()}, {"window", ds.window_length},
                       {"train", ds.size()},               {"subtrain", sub.size()},
                       {"validation", val.size()}};
    update_manifest(c.out, "slice", c.cfg, artifacts, info);
    c.log << "holdout " << split.holdout.size() << " trajectories, training " << train.size() << " trajectories -> "
          << ds.size() << " samples (T=" << ds.window_length << "), subtrain " << sub.size() << ", validation "
          << val.size() << '\n';
    return exit_ok;
}

// ---------------------------------------------------------------- search / train helpers

struct Splits {
    data::Dataset subtrain, validation;
};

Splits load_splits(const Context& c) {
    const fs::path dd = c.in / "dataset";
    for (const char* f : {"subtrain.csv", "validation.csv"})
        if (!fs::exists(dd / f)) throw MissingInputError("missing " + (dd / f).string() + " (run slice first)");
    return {data::read_dataset_csv(dd / "subtrain.csv", data::SplitTag::subtrain),
            data::read_dataset_csv(dd / "validation.csv", data::SplitTag::validation)};
}

json kernel_json(const krr::KernelSpec& s, double lambda) {
    return {{"family", krr::to_string(s.family)}, {"sigma", s.sigma}, {"n", s.n},
            {"period", s.period}, {"sigma_p", s.sigma_p}, {"lambda", lambda}};
}

int input_length(const data::Dataset& d) { return static_cast<int>(d.window_length); }

// 1D CNN with the given convolution sizes and the fixed dense head.
nn::NetSpec cnn_spec(int k1, int s1, int k2, int s2, int length) {
    nn::NetSpec spec;
    spec.name = "1D CNN";
    spec.input_length = length;
    spec.layers = {nn::LayerSpec::conv1d(k1, s1), nn::LayerSpec::conv1d(k2, s2), nn::LayerSpec::maxpool1d(2, 2),
                   nn::LayerSpec::flatten(),      nn::LayerSpec::dense(256), nn::LayerSpec::dense(1, nn::Activation::linear)};
    spec.validate();
    return spec;
}

std::optional<json> find_search(const Context& c, const std::string& id) {
    for (const auto& dir : {c.out, c.in}) {
        const auto p = dir / "search" / (id + ".json");
        if (fs::exists(p)) return read_json_file(p);
    }
    return std::nullopt;
}

int search_krr(Context& c, const std::string& id, const Splits& s) {
    const auto t0 = Clock::now();
    const auto tr = data::subsample(s.subtrain, c.cfg.krr.search_samples, c.seeds.krr_search);
    const auto va = data::subsample(s.validation, c.cfg.krr.search_validation_samples, c.seeds.krr_search + 1);
    auto grid = krr::SearchGrid::log2_default(c.cfg.krr.grid_stride);
    grid.random_budget = c.cfg.krr.random_budget;
    const auto r = krr::hyperparameter_search(tr, va, kernel_of(id), grid, c.seeds.krr_search);
    if (!std::isfinite(r.validation_mae))
        throw NumericalError("search: every candidate of " + id + " failed to solve");

    const fs::path dir = c.out / "search";
    json j = kernel_json(r.spec, r.lambda_reg);
    j["model"] = id;
    j["validation_mae"] = r.validation_mae;
    j["candidates"] = r.evaluated.size();
    j["train_samples"] = tr.size();
    j["validation_samples"] = va.size();
    write_json_file(dir / (id + ".json"), j);
    {
        std::ofstream f(dir / (id + ".csv"));
        f << "sigma,period,sigma_p,lambda,validation_mae\n" << std::setprecision(17);
        for (const auto& cand : r.evaluated)
            f << cand.spec.sigma << ',' << cand.spec.period << ',' << cand.spec.sigma_p << ',' << cand.lambda_reg
              << ',' << cand.validation_mae << '\n';
    }
    update_manifest(c.out, "search/" + id, c.cfg, {dir / (id + ".json"), dir / (id + ".csv")},
                    {{"seconds", seconds_since(t0)}});
    c.log << "search " << id << ":";
    if (r.spec.family != krr::KernelFamily::linear) c.log << " sigma " << r.spec.sigma;
    if (r.spec.family == krr::KernelFamily::decaying_periodic)
        c.log << " period " << r.spec.period << " sigma_p " << r.spec.sigma_p;
    c.log << " lambda " << r.lambda_reg << " validation MAE "
          << r.validation_mae << " (" << r.evaluated.size() << " candidates)\n";
    return exit_ok;
}

int search_cnn(Context& c, const Splits& s) {
    const auto& o = c.cfg.cnn_search;
    const auto tr = o.max_samples ? data::subsample(s.subtrain, o.max_samples, c.seeds.pso) : s.subtrain;
    const auto& va = s.validation;
    const int length = input_length(tr);
    nn::TrainOpts topts = c.cfg.nn.train;
    topts.epochs = o.epochs;
    topts.batch_size = o.batch_size;
    topts.seed = c.seeds.nn_train;
    std::mutex log_mutex;
    const pso::Objective objective = [&](const Eigen::VectorXd& x) {
        int v[4];
        for (int d = 0; d < 4; ++d) v[d] = static_cast<int>(std::lround(x(d)));
        double fit = std::numeric_limits<double>::infinity();
        try {
            const auto model = nn::build_model(cnn_spec(v[0], v[1], v[2], v[3], length), c.seeds.nn_init);
            fit = nn::train(model, tr, &va, topts).history.epochs.back().val_mse;
        } catch (const ConfigError&) {
        } catch (const NumericalError&) {
        }
        std::lock_guard<std::mutex> lock(log_mutex);
        c.log << "pso cnn1d kernels " << v[0] << " size " << v[1] << " kernels " << v[2] << " size " << v[3]
              << " validation MSE " << fit << std::endl;
        return fit;
    };
    auto pcfg = o.pso;
    pcfg.seed = c.seeds.pso;
    const auto t0 = Clock::now();
    const auto r = pso::pso_optimize(objective, pcfg);
    if (!std::isfinite(r.best_fitness)) throw NumericalError("search: no valid cnn1d configuration was found");

    const fs::path dir = c.out / "search";
    json j = {{"model", "cnn1d"},
              {"kernels_1", std::lround(r.best_position(0))},
              {"kernel_size_1", std::lround(r.best_position(1))},
              {"kernels_2", std::lround(r.best_position(2))},
              {"kernel_size_2", std::lround(r.best_position(3))},
              {"validation_mse", r.best_fitness},
              {"nan_evaluations", r.nan_evaluations}};
    write_json_file(dir / "cnn1d.json", j);
    pso::write_history_csv(r, dir / "cnn1d.pso.csv");
    update_manifest(c.out, "search/cnn1d", c.cfg, {dir / "cnn1d.json", dir / "cnn1d.pso.csv"},
                    {{"seconds", seconds_since(t0)}});
    c.log << "search cnn1d: " << j.dump() << '\n';
    return exit_ok;
}

int cmd_search(Context& c) {
    for (const auto& id : c.cfg.models)
        if (!is_krr(id) && id != "cnn1d")
            throw ConfigError("config field 'models': no search is defined for '" + id +
                              "' (kernel models and cnn1d only)");
    const auto s = load_splits(c);
    for (const auto& id : c.cfg.models) {
        if (is_krr(id)) search_krr(c, id, s);
        else search_cnn(c, s);
    }
    return exit_ok;
}

std::pair<krr::KernelSpec, double> krr_hyperparameters(Context& c, const std::string& id, const Splits& s) {
    krr::KernelSpec spec = kernel_of(id);
    if (c.cfg.model_options.contains(id)) {
        const json& o = c.cfg.model_options[id];
        for (const auto& [k, v] : o.items())
            if (k != "sigma" && k != "lambda" && k != "period" && k != "sigma_p")
                throw ConfigError("config field 'model_options." + id + "." + k + "': unknown field");
        if (o.contains("lambda")) {
            spec.sigma = o.value("sigma", spec.sigma);
            spec.period = o.value("period", spec.period);
            spec.sigma_p = o.value("sigma_p", spec.sigma_p);
            try {
                spec.validate();
            } catch (const ConfigError& e) {
                throw ConfigError("config field 'model_options." + id + "': " + e.what());
            }
            return {spec, o["lambda"].get<double>()};
        }
    }
    auto found = find_search(c, id);
    if (!found) {
        search_krr(c, id, s);
        found = find_search(c, id);
    }
    const json& j = *found;
    spec.sigma = j.at("sigma").get<double>();
    spec.period = j.at("period").get<double>();
    spec.sigma_p = j.at("sigma_p").get<double>();
    return {spec, j.at("lambda").get<double>()};
}

nn::NetSpec net_spec(Context& c, const std::string& id, int length) {
    if (id == "cnn1d")
        if (const auto found = find_search(c, "cnn1d"))
            return cnn_spec((*found)["kernels_1"].get<int>(), (*found)["kernel_size_1"].get<int>(),
                            (*found)["kernels_2"].get<int>(), (*found)["kernel_size_2"].get<int>(), length);
    return nn::architecture(id, length);
}

int train_one(Context& c, const std::string& id, const Splits& s) {
    const fs::path dir = c.out / "models";
    fs::create_directories(dir);
    std::vector<fs::path> artifacts;
    json meta = {{"model", id}};
    if (is_krr(id)) {
        const auto [spec, lambda] = krr_hyperparameters(c, id, s);
        const auto tr = data::subsample(s.subtrain, c.cfg.krr.max_samples, c.seeds.krr_subsample);
        const auto x = krr::inputs_matrix(tr);
        const auto y = krr::labels_vector(tr);
        krr::SolveInfo info;
        const auto t0 = Clock::now();
        const auto model = krr::krr_train(x, y, spec, lambda, &info);
        const double secs = seconds_since(t0);
        krr::save_model(model, dir / (id + ".krr"));
        artifacts.push_back(dir / (id + ".krr"));
        meta["kind"] = "krr";
        meta["kernel"] = kernel_json(spec, lambda);
        meta["samples"] = tr.size();
        meta["parameters"] = model.size();
        meta["jitter"] = info.jitter;
        meta["train_seconds"] = secs;
        c.log << "train " << id << ": " << tr.size() << " samples, " << secs << " s\n";
    } else {
        const int length = input_length(s.subtrain);
        const auto spec = net_spec(c, id, length);
        nn::TrainOpts opts = c.cfg.nn.train;
        if (c.cfg.model_options.contains(id)) {
            for (const auto& [k, v] : c.cfg.model_options[id].items()) {
                const std::string field = "config field 'model_options." + id + "." + k + "'";
                if (k == "learning_rate" && v.is_number()) opts.learning_rate = v.get<double>();
                else if (k == "batch_size" && v.is_number_integer()) opts.batch_size = v.get<int>();
                else if (k == "epochs" && v.is_number_integer()) opts.epochs = v.get<int>();
                else if (k == "clip_norm" && v.is_number()) opts.clip_norm = v.get<double>();
                else throw ConfigError(field + ": unknown field or wrong type");
            }
            try {
                opts.validate();
            } catch (const ConfigError& e) {
                throw ConfigError("config field 'model_options." + id + "': " + e.what());
            }
        }
        opts.seed = c.seeds.nn_train;
        const auto tr = c.cfg.nn.max_samples ? data::subsample(s.subtrain, c.cfg.nn.max_samples, c.seeds.nn_train)
                                             : s.subtrain;
        const auto va = c.cfg.nn.validation_samples
                            ? data::subsample(s.validation, c.cfg.nn.validation_samples, c.seeds.nn_train + 1)
                            : s.validation;
        const auto model = nn::build_model(spec, c.seeds.nn_init);
        c.log << "train " << id << " (" << spec.name << ", " << model.parameters.size() << " parameters) on "
              << tr.size() << " samples" << std::endl;
        nn::TrainResult r;
        try {
            r = nn::train(model, tr, &va, opts, [&](const nn::EpochRecord& e) {
                c.log << "  epoch " << e.epoch << " train MSE " << e.train_mse << " validation MSE " << e.val_mse
                      << std::endl;
            });
        } catch (const NumericalError& e) {
            throw NumericalError("train: model " + id + ": " + e.what());
        }
        nn::save_model(r.model, dir / (id + ".nn"));
        r.history.write_csv(dir / (id + ".loss.csv"));
        artifacts.push_back(dir / (id + ".nn"));
        artifacts.push_back(dir / (id + ".loss.csv"));
        meta["kind"] = "nn";
        meta["architecture"] = spec.name;
        meta["parameters"] = model.parameters.size();
        meta["samples"] = tr.size();
        meta["epochs"] = opts.epochs;
        meta["learning_rate"] = opts.learning_rate;
        meta["batch_size"] = opts.batch_size;
        meta["final_validation_mse"] = r.history.epochs.back().val_mse;
        meta["train_seconds"] = r.wall_seconds;
    }
    write_json_file(dir / (id + ".json"), meta);
    artifacts.push_back(dir / (id + ".json"));
    update_manifest(c.out, "train/" + id, c.cfg, artifacts, meta);
    return exit_ok;
}

int cmd_train(Context& c) {
    const auto s = load_splits(c);
    for (const auto& id : c.cfg.models) train_one(c, id, s);
    return exit_ok;
}

// ---------------------------------------------------------------- forecast / benchmark / report

forecast::Forecaster load_forecaster(const Context& c, const std::string& id) {
    for (const auto& dir : {c.in / "models", c.out / "models"}) {
        if (is_krr(id) && fs::exists(dir / (id + ".krr")))
            return forecast::Forecaster::from_krr(id, krr::load_model(dir / (id + ".krr")));
        if (!is_krr(id) && fs::exists(dir / (id + ".nn")))
            return forecast::Forecaster::from_net(id, nn::load_model(dir / (id + ".nn")));
    }
    throw MissingInputError("no trained model '" + id + "' under " + (c.in / "models").string() + " (run train first)");
}

double train_seconds(const Context& c, const std::string& id) {
    for (const auto& dir : {c.in / "models", c.out / "models"})
        if (fs::exists(dir / (id + ".json"))) return read_json_file(dir / (id + ".json")).value("train_seconds", 0.0);
    throw MissingInputError("no metadata for model '" + id + "' under " + (c.in / "models").string());
}

fs::path holdout_dir(const Context& c) { return c.opt.holdout.empty() ? c.in / "holdout" : fs::path(c.opt.holdout); }

int cmd_forecast(Context& c) {
    const auto hold = read_trajectory_dir(holdout_dir(c));
    const fs::path dir = c.out / "forecasts";
    for (const auto& id : c.cfg.models) {
        const auto f = load_forecaster(c, id);
        const std::size_t t = f.window_length();
        std::vector<fs::path> artifacts;
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < hold.size(); ++k) {
            const auto& traj = hold[k];
            if (traj.size() <= t) throw ConfigError("holdout trajectory " + std::to_string(k) + " is shorter than the window");
            std::vector<double> pred;
            try {
                pred = forecast::recursive_forecast(f, std::span<const double>(traj.values.data(), t), traj.size() - t);
            } catch (const forecast::DivergenceError& e) {
                throw NumericalError("forecast: model " + id + ", holdout trajectory " + std::to_string(k) + " (" +
                                     refdyn::trajectory_filename(traj.params) + "): " + e.what());
            }
            const auto stem = fs::path(refdyn::trajectory_filename(traj.params)).stem().string();
            const auto path = dir / (id + "__" + stem + ".csv");
            fs::create_directories(dir);
            std::ofstream out(path);
            out << "t,reference,predicted\n" << std::setprecision(17);
            for (std::size_t i = 0; i < pred.size(); ++i) {
                out << traj.times[t + i] << ',' << traj.values[t + i] << ',' << pred[i] << '\n';
                sum += std::abs(pred[i] - traj.values[t + i]);
            }
            n += pred.size();
            artifacts.push_back(path);
        }
        const double mae = sum / static_cast<double>(n);
        update_manifest(c.out, "forecast/" + id, c.cfg, artifacts, {{"mae", mae}, {"trajectories", hold.size()}});
        c.log << "forecast " << id << ": " << hold.size() << " trajectories, MAE " << mae << '\n';
    }
    return exit_ok;
}

std::string fmt(double v, bool time = false) {
    if (std::isnan(v)) return "-";
    if (std::isinf(v)) return "diverged";
    std::ostringstream s;
    s << std::setprecision(time ? 3 : 2) << std::scientific << v;
    return s.str();
}

std::string render_table(const json& report) {
    std::ostringstream t;
    t << "| Model | Parameters | MAE (symmetric) | MAE (asymmetric) | MAE | Training time [s] | Prediction time [s] |\n";
    t << "|---|---:|---:|---:|---:|---:|---:|\n";
    const auto num = [](const json& v, bool diverged) {
        if (v.is_null()) return diverged ? std::numeric_limits<double>::infinity() : std::nan("");
        return v.get<double>();
    };
    for (const auto& r : report.at("rows")) {
        const bool div = r.value("diverged", false);
        t << "| " << r.at("model").get<std::string>() << " | " << r.at("parameters").get<std::size_t>() << " | "
          << fmt(num(r.at("mae_symmetric"), div)) << " | " << fmt(num(r.at("mae_asymmetric"), div)) << " | "
          << fmt(num(r.at("mae"), div)) << " | " << fmt(r.at("train_seconds").get<double>(), true) << " | "
          << fmt(num(r.at("predict_seconds"), false), true) << " |\n";
    }
    return t.str();
}

int cmd_benchmark(Context& c) {
    const auto hold = read_trajectory_dir(holdout_dir(c));
    std::vector<forecast::BenchmarkModel> models;
    for (const auto& id : c.cfg.models) models.push_back({load_forecaster(c, id), train_seconds(c, id)});
    forecast::BenchmarkConfig bc;
    bc.seed_points = models.front().forecaster.window_length();
    bc.timing_repeats = c.cfg.benchmark.timing_repeats;
    bc.timing_trajectories = c.cfg.benchmark.timing_trajectories;
    const auto rep = forecast::run_benchmark(models, hold, bc);

    const fs::path dir = c.out / "report";
    fs::remove_all(dir / "plots");
    forecast::write_report_csv(rep, dir / "benchmark.csv");
    forecast::write_report_json(rep, dir / "benchmark.json");
    auto artifacts = forecast::write_plot_files(rep, dir / "plots");
    artifacts.push_back(dir / "benchmark.csv");
    artifacts.push_back(dir / "benchmark.json");
    json info = json::array();
    for (const auto& r : rep.rows) info.push_back({{"model", r.model}, {"mae", std::isfinite(r.mae) ? json(r.mae) : json(nullptr)}});
    update_manifest(c.out, "benchmark", c.cfg, artifacts, {{"rows", info}, {"holdout", hold.size()}});
    c.log << render_table(read_json_file(dir / "benchmark.json"));
    return exit_ok;
}

int cmd_report(Context& c) {
    const auto src = c.in / "report" / "benchmark.json";
    if (!fs::exists(src)) throw MissingInputError("missing " + src.string() + " (run benchmark first)");
    const std::string table = render_table(read_json_file(src));
    const auto path = c.out / "report" / "table.md";
    fs::create_directories(path.parent_path());
    std::ofstream(path) << table;
    update_manifest(c.out, "report", c.cfg, {path});
    c.log << table;
    return exit_ok;
}

void add_common(CLI::App* sub, Options& o) {
    sub->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "run directory for outputs");
    sub->add_option("--in", o.in, "run directory holding the inputs (default: --out)");
    sub->add_option("--seed", o.seed, "base seed of every stochastic stage");
    sub->add_option("--threads", o.threads, "worker threads");
    sub->add_option("--set", o.sets, "override a config field, e.g. --set dataset.holdout=50");
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Benchmark workbench for spin-boson dynamics forecasting", "qdbench"};
    app.require_subcommand(1);
    Options o;

    auto* gen = app.add_subcommand("generate", "propagate reference trajectories over the parameter grid");
    add_common(gen, o);
    gen->add_option("--grid", o.grid, "full, symmetric or asymmetric");
    gen->add_option("--points", o.points, "seeded subset of this many grid points");
    gen->add_flag("--resume", o.resume, "keep trajectory files that already exist");
    gen->add_flag("--skip-failed", o.skip_failed, "leave out grid points whose hierarchy does not converge");

    auto* sl = app.add_subcommand("slice", "hold-out selection, window slicing and sub-training split");
    add_common(sl, o);
    sl->add_option("--window", o.window, "input window length T (slice length T+1)");
    sl->add_option("--holdout-count", o.n_holdout, "number of hold-out trajectories");

    auto* tr = app.add_subcommand("train", "train models on the sub-training set");
    add_common(tr, o);
    tr->add_option("--models", o.models, "comma-separated model ids");
    tr->add_option("--epochs", o.epochs, "training epochs of the networks");
    tr->add_option("--lr", o.lr, "Adam learning rate");
    tr->add_option("--batch", o.batch, "mini-batch size");
    tr->add_option("--max-samples", o.max_samples, "cap on the training samples");

    auto* se = app.add_subcommand("search", "hyperparameter search (kernel grids, PSO for cnn1d)");
    add_common(se, o);
    se->add_option("--models", o.models, "comma-separated model ids");

    auto* fc = app.add_subcommand("forecast", "recursive forecasts of the hold-out trajectories");
    add_common(fc, o);
    fc->add_option("--models", o.models, "comma-separated model ids");
    fc->add_option("--holdout", o.holdout, "hold-out trajectory directory");

    auto* bm = app.add_subcommand("benchmark", "accuracy and timing report over the hold-out set");
    add_common(bm, o);
    bm->add_option("--models", o.models, "comma-separated model ids");
    bm->add_option("--holdout", o.holdout, "hold-out trajectory directory");

    auto* rp = app.add_subcommand("report", "render the benchmark table");
    add_common(rp, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        Context c = make_context(o, out);
        if (gen->parsed()) return cmd_generate(c);
        if (sl->parsed()) return cmd_slice(c);
        if (tr->parsed()) return cmd_train(c);
        if (se->parsed()) return cmd_search(c);
        if (fc->parsed()) return cmd_forecast(c);
        if (bm->parsed()) return cmd_benchmark(c);
        if (rp->parsed()) return cmd_report(c);
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return exit_config;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return exit_numerical;
    } catch (const MissingInputError& e) {
        err << "missing input: " << e.what() << '\n';
        return exit_missing;
    } catch (const json::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_config;
    } catch (const fs::filesystem_error& e) {
        err << "missing input: " << e.what() << '\n';
        return exit_missing;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_config;
    }
    return exit_config;
}

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv;
    argv.push_back("qdbench");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_command(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace qdbench::cli
