#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "qdbench/cli.hpp"
#include "qdbench/errors.hpp"

namespace qdbench::cli {

using nlohmann::json;

namespace {

std::string dotted(const json::json_pointer& p) {
    std::string s = p.to_string();
    if (!s.empty() && s[0] == '/') s.erase(0, 1);
    std::replace(s.begin(), s.end(), '/', '.');
    return s;
}

[[noreturn]] void bad(const std::string& field, const std::string& what) {
    throw ConfigError("config field '" + field + "': " + what);
}

// Fields of `user` must exist in `defaults` with a compatible type.
void check_against(const json& defaults, const json& user, const json::json_pointer& at) {
    for (const auto& [key, value] : user.items()) {
        const auto path = at / key;
        const std::string name = dotted(path);
        if (path.to_string() == "/grid") {
            if (value.is_string()) continue;
            if (!value.is_object()) bad(name, "expected a grid name or an object of value lists");
            for (const auto& [k, v] : value.items()) {
                if (k != "epsilon" && k != "lambda" && k != "omega_c" && k != "beta") bad(name + "." + k, "unknown field");
                if (!v.is_array() || v.empty()) bad(name + "." + k, "expected a non-empty list of numbers");
                for (const auto& x : v)
                    if (!x.is_number()) bad(name + "." + k, "expected numbers");
            }
            continue;
        }
        if (!defaults.contains(key)) bad(name, "unknown field");
        const json& d = defaults[key];
        if (value.is_null()) bad(name, "null is not allowed");
        if (path.to_string() == "/model_options") {
            if (!value.is_object()) bad(name, "expected an object keyed by model id");
            for (const auto& [id, opts] : value.items()) {
                const auto& ids = model_ids();
                if (std::find(ids.begin(), ids.end(), id) == ids.end()) bad(name + "." + id, "unknown model id");
                if (!opts.is_object()) bad(name + "." + id, "expected an object");
            }
            continue;
        }
        if (d.is_object()) {
            if (!value.is_object()) bad(name, "expected an object");
            check_against(d, value, path);
        } else if (d.is_boolean()) {
            if (!value.is_boolean()) bad(name, "expected true or false");
        } else if (d.is_number_integer()) {
            if (!value.is_number_integer()) bad(name, "expected an integer");
        } else if (d.is_number()) {
            if (!value.is_number()) bad(name, "expected a number");
        } else if (d.is_string()) {
            if (!value.is_string()) bad(name, "expected a string");
        } else if (d.is_array()) {
            if (!value.is_array()) bad(name, "expected a list");
        }
    }
}

std::vector<double> numbers(const json& j, const std::string& name) {
    std::vector<double> out;
    for (const auto& x : j) out.push_back(x.get<double>());
    if (out.empty()) bad(name, "empty list");
    return out;
}

template <class T>
T get_uint(const json& j, const char* section, const char* key) {
    const auto v = j.at(section).at(key).get<long long>();
    if (v < 0) bad(std::string(section) + "." + key, "must be non-negative");
    return static_cast<T>(v);
}

double positive(const json& j, const char* section, const char* key) {
    const double v = j.at(section).at(key).get<double>();
    if (!(v > 0.0) || !std::isfinite(v)) bad(std::string(section) + "." + key, "must be positive");
    return v;
}

}  // namespace

const std::vector<std::string>& model_ids() {
    static const std::vector<std::string> ids = {
        "krr-l", "krr-g",  "krr-dp", "krr-e",  "krr-m1", "krr-m2", "krr-m3", "krr-m4", "ffnn",  "cnn1d",  "rnn",
        "lstm",  "gru",    "brnn",   "blstm",  "bgru",   "crnn",   "clstm",  "cgru",   "cbrnn", "cblstm", "cbgru"};
    return ids;
}

bool is_krr(const std::string& id) { return id.rfind("krr-", 0) == 0; }

krr::KernelSpec kernel_of(const std::string& id) {
    if (id == "krr-l") return krr::KernelSpec::linear();
    if (id == "krr-g") return krr::KernelSpec::gaussian(1.0);
    if (id == "krr-e") return krr::KernelSpec::exponential(1.0);
    if (id == "krr-dp") return krr::KernelSpec::decaying_periodic(1.0, 1.0, 1.0);
    if (id.size() == 6 && id.rfind("krr-m", 0) == 0 && id[5] >= '1' && id[5] <= '4')
        return krr::KernelSpec::matern(1.0, id[5] - '0');
    throw ConfigError("'" + id + "' is not a kernel model id");
}

json default_config() {
    const nn::TrainOpts t;
    const refdyn::HierarchyConfig h;
    const pso::PsoConfig p;
    return {
        {"seed", 0},
        {"threads", 1},
        {"out", ""},
        {"grid", "full"},
        {"grid_subset", 0},
        {"hierarchy",
         {{"depth", h.depth},
          {"n_matsubara", h.n_matsubara},
          {"decomposition", "pade"},
          {"dt_integrate", h.dt_integrate},
          {"t_max", h.t_max},
          {"dt_save", h.dt_save},
          {"terminator", h.terminator},
          {"convergence_tol", h.convergence_tol},
          {"max_depth", h.max_depth},
          {"max_matsubara", h.max_matsubara},
          {"max_auxiliary", h.max_auxiliary}}},
        {"dataset", {{"slice_length", 42}, {"holdout", 0}, {"subtrain_fraction", 0.8}}},
        {"models", model_ids()},
        {"model_options", json::object()},
        {"krr",
         {{"max_samples", 4000},
          {"search_samples", 1000},
          {"search_validation_samples", 1000},
          {"grid_stride", 1},
          {"random_budget", 128}}},
        {"nn",
         {{"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"clip_norm", t.clip_norm},
          {"max_samples", 0},
          {"validation_samples", 0}}},
        {"pso",
         {{"particles", p.n_particles},
          {"generations", p.n_generations},
          {"w", p.w},
          {"c_p", p.c_p},
          {"c_g", p.c_g},
          {"velocity_scale", p.velocity_scale},
          {"stochastic", p.stochastic},
          {"move_with_new_velocity", p.move_with_new_velocity},
          {"kernels", {16.0, 256.0}},
          {"kernel_size", {2.0, 16.0}},
          {"epochs", 30},
          {"batch_size", 64},
          {"max_samples", 0}}},
        {"benchmark", {{"timing_repeats", 5}, {"timing_trajectories", 0}}},
    };
}

void apply_override(json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    std::replace(key.begin(), key.end(), '.', '/');
    config[json::json_pointer("/" + key)] = value;
}

RunConfig RunConfig::from_json(const json& user) {
    if (!user.is_object()) throw ConfigError("config must be a JSON object");
    const json defaults = default_config();
    check_against(defaults, user, json::json_pointer());
    json j = defaults;
    for (const auto& [k, v] : user.items()) {
        if (v.is_object() && j[k].is_object() && k != "model_options") {
            for (const auto& [k2, v2] : v.items()) j[k][k2] = v2;
        } else {
            j[k] = v;
        }
    }

    RunConfig c;
    c.source = j;
    c.seed = static_cast<std::uint64_t>(j.at("seed").get<long long>());
    if (j.at("seed").get<long long>() < 0) bad("seed", "must be non-negative");
    c.threads = j.at("threads").get<int>();
    if (c.threads < 1) bad("threads", "must be at least 1");
    c.out = j.at("out").get<std::string>();

    const json& g = j.at("grid");
    if (g.is_string()) {
        c.grid_name = g.get<std::string>();
        if (c.grid_name == "full") c.grid = data::GridSpec::full();
        else if (c.grid_name == "symmetric") c.grid = data::GridSpec::symmetric();
        else if (c.grid_name == "asymmetric") c.grid = data::GridSpec::asymmetric();
        else bad("grid", "expected full, symmetric, asymmetric or an object");
    } else {
        c.grid_name = "custom";
        c.grid = data::GridSpec::full();
        if (g.contains("epsilon")) c.grid.epsilon_values = numbers(g["epsilon"], "grid.epsilon");
        if (g.contains("lambda")) c.grid.lambda_values = numbers(g["lambda"], "grid.lambda");
        if (g.contains("omega_c")) c.grid.omega_c_values = numbers(g["omega_c"], "grid.omega_c");
        if (g.contains("beta")) c.grid.beta_values = numbers(g["beta"], "grid.beta");
    }
    c.grid_subset = static_cast<std::size_t>(j.at("grid_subset").get<long long>());
    if (j.at("grid_subset").get<long long>() < 0) bad("grid_subset", "must be non-negative");

    const json& h = j.at("hierarchy");
    c.hierarchy.depth = h.at("depth").get<int>();
    c.hierarchy.n_matsubara = h.at("n_matsubara").get<int>();
    const auto dec = h.at("decomposition").get<std::string>();
    if (dec == "pade") c.hierarchy.decomposition = refdyn::BathDecomposition::pade;
    else if (dec == "matsubara") c.hierarchy.decomposition = refdyn::BathDecomposition::matsubara;
    else bad("hierarchy.decomposition", "expected pade or matsubara");
    c.hierarchy.dt_integrate = positive(j, "hierarchy", "dt_integrate");
    c.hierarchy.t_max = positive(j, "hierarchy", "t_max");
    c.hierarchy.dt_save = positive(j, "hierarchy", "dt_save");
    c.hierarchy.terminator = h.at("terminator").get<bool>();
    c.hierarchy.convergence_tol = positive(j, "hierarchy", "convergence_tol");
    c.hierarchy.max_depth = h.at("max_depth").get<int>();
    c.hierarchy.max_matsubara = h.at("max_matsubara").get<int>();
    if (h.at("max_auxiliary").get<double>() < 1.0) bad("hierarchy.max_auxiliary", "must be positive");
    c.hierarchy.max_auxiliary = h.at("max_auxiliary").get<std::size_t>();
    if (c.hierarchy.depth < 1) bad("hierarchy.depth", "must be at least 1");
    if (c.hierarchy.n_matsubara < 0) bad("hierarchy.n_matsubara", "must be non-negative");
    if (c.hierarchy.max_depth <= c.hierarchy.depth) bad("hierarchy.max_depth", "must exceed hierarchy.depth");
    if (c.hierarchy.max_matsubara <= c.hierarchy.n_matsubara)
        bad("hierarchy.max_matsubara", "must exceed hierarchy.n_matsubara");
    try {
        c.hierarchy.validate(refdyn::SpinBosonParams{});
    } catch (const ConfigError& e) {
        bad("hierarchy", e.what());
    }

    c.dataset.slice_length = get_uint<std::size_t>(j, "dataset", "slice_length");
    if (c.dataset.slice_length < 2) bad("dataset.slice_length", "must be at least 2");
    c.dataset.holdout = get_uint<std::size_t>(j, "dataset", "holdout");
    c.dataset.subtrain_fraction = j.at("dataset").at("subtrain_fraction").get<double>();
    if (!(c.dataset.subtrain_fraction > 0.0 && c.dataset.subtrain_fraction < 1.0))
        bad("dataset.subtrain_fraction", "must lie strictly between 0 and 1");

    for (const auto& m : j.at("models")) {
        if (!m.is_string()) bad("models", "expected model id strings");
        const auto id = m.get<std::string>();
        const auto& ids = model_ids();
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) bad("models", "unknown model id '" + id + "'");
        c.models.push_back(id);
    }
    c.model_options = j.at("model_options");

    c.krr.max_samples = get_uint<std::size_t>(j, "krr", "max_samples");
    c.krr.search_samples = get_uint<std::size_t>(j, "krr", "search_samples");
    c.krr.search_validation_samples = get_uint<std::size_t>(j, "krr", "search_validation_samples");
    c.krr.grid_stride = j.at("krr").at("grid_stride").get<int>();
    c.krr.random_budget = j.at("krr").at("random_budget").get<int>();
    if (c.krr.max_samples < 1) bad("krr.max_samples", "must be at least 1");
    if (c.krr.grid_stride < 1) bad("krr.grid_stride", "must be at least 1");
    if (c.krr.random_budget < 1) bad("krr.random_budget", "must be at least 1");

    const json& n = j.at("nn");
    c.nn.train.learning_rate = positive(j, "nn", "learning_rate");
    c.nn.train.batch_size = n.at("batch_size").get<int>();
    c.nn.train.epochs = n.at("epochs").get<int>();
    c.nn.train.beta1 = n.at("beta1").get<double>();
    c.nn.train.beta2 = n.at("beta2").get<double>();
    c.nn.train.epsilon = positive(j, "nn", "epsilon");
    c.nn.train.clip_norm = n.at("clip_norm").get<double>();
    c.nn.max_samples = get_uint<std::size_t>(j, "nn", "max_samples");
    c.nn.validation_samples = get_uint<std::size_t>(j, "nn", "validation_samples");
    try {
        c.nn.train.validate();
    } catch (const ConfigError& e) {
        bad("nn", e.what());
    }

    const json& p = j.at("pso");
    auto& ps = c.cnn_search;
    ps.pso.n_particles = p.at("particles").get<int>();
    ps.pso.n_generations = p.at("generations").get<int>();
    ps.pso.w = p.at("w").get<double>();
    ps.pso.c_p = p.at("c_p").get<double>();
    ps.pso.c_g = p.at("c_g").get<double>();
    ps.pso.velocity_scale = p.at("velocity_scale").get<double>();
    ps.pso.stochastic = p.at("stochastic").get<bool>();
    ps.pso.move_with_new_velocity = p.at("move_with_new_velocity").get<bool>();
    const auto range = [&](const char* key, double& lo, double& hi) {
        const json& r = p.at(key);
        if (r.size() != 2 || !r[0].is_number() || !r[1].is_number()) bad(std::string("pso.") + key, "expected [lo, hi]");
        lo = r[0].get<double>();
        hi = r[1].get<double>();
        if (!(lo >= 1.0 && lo < hi)) bad(std::string("pso.") + key, "need 1 <= lo < hi");
    };
    range("kernels", ps.kernels_lo, ps.kernels_hi);
    range("kernel_size", ps.size_lo, ps.size_hi);
    ps.epochs = p.at("epochs").get<int>();
    ps.batch_size = p.at("batch_size").get<int>();
    ps.max_samples = get_uint<std::size_t>(j, "pso", "max_samples");
    if (ps.epochs < 1) bad("pso.epochs", "must be at least 1");
    if (ps.batch_size < 1) bad("pso.batch_size", "must be at least 1");
    // Positions are rounded to integers; anything rounding below 1 is re-drawn.
    ps.pso.bounds = {{ps.kernels_lo, ps.kernels_hi},
                     {ps.size_lo, ps.size_hi},
                     {ps.kernels_lo, ps.kernels_hi},
                     {ps.size_lo, ps.size_hi}};
    ps.pso.limits = {{0.5, 4.0 * ps.kernels_hi}, {0.5, 4.0 * ps.size_hi}, {0.5, 4.0 * ps.kernels_hi}, {0.5, 4.0 * ps.size_hi}};
    ps.pso.threads = c.threads;
    try {
        ps.pso.validate();
    } catch (const ConfigError& e) {
        bad("pso", e.what());
    }

    c.benchmark.timing_repeats = j.at("benchmark").at("timing_repeats").get<int>();
    if (c.benchmark.timing_repeats < 1) bad("benchmark.timing_repeats", "must be at least 1");
    c.benchmark.timing_trajectories = get_uint<std::size_t>(j, "benchmark", "timing_trajectories");
    return c;
}

std::string RunConfig::hash() const { return sha256_hex_string(source.dump()); }

StageSeeds::StageSeeds(std::uint64_t b)
    : holdout(b), shuffle(b + 1), split(b + 2), grid_subset(b + 3), krr_subsample(b + 4), krr_search(b + 5),
      nn_init(b + 6), nn_train(b + 7), pso(b + 8) {}

json StageSeeds::to_json() const {
    return {{"holdout", holdout},           {"shuffle", shuffle},       {"split", split},
            {"grid_subset", grid_subset},   {"krr_subsample", krr_subsample}, {"krr_search", krr_search},
            {"nn_init", nn_init},           {"nn_train", nn_train},     {"pso", pso}};
}

namespace {

std::string digest_hex(EVP_MD_CTX* ctx) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream s;
    for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return s.str();
}

EVP_MD_CTX* new_sha256() {
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 unavailable");
    return ctx;
}

}  // namespace

std::string sha256_hex_string(const std::string& data) {
    EVP_MD_CTX* ctx = new_sha256();
    EVP_DigestUpdate(ctx, data.data(), data.size());
    return digest_hex(ctx);
}

std::string sha256_hex(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw MissingInputError("cannot read " + file.string());
    EVP_MD_CTX* ctx = new_sha256();
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return digest_hex(ctx);
}

void update_manifest(const std::filesystem::path& run_dir, const std::string& stage, const RunConfig& cfg,
                     const std::vector<std::filesystem::path>& artifacts, const json& info) {
    const auto path = run_dir / "manifest.json";
    json m = json::object();
    if (std::filesystem::exists(path)) {
        std::ifstream in(path);
        try {
            m = json::parse(in);
        } catch (const json::parse_error&) {
            throw ConfigError(path.string() + " is not valid JSON");
        }
    }
    m["format"] = "qdbench-run";
    json list = json::array();
    for (const auto& a : artifacts) {
        const auto rel = std::filesystem::relative(a, run_dir);
        list.push_back({{"path", rel.generic_string()},
                        {"sha256", sha256_hex(a)},
                        {"bytes", std::filesystem::file_size(a)}});
    }
    m["stages"][stage] = {{"config_hash", cfg.hash()},
                          {"config", cfg.source},
                          {"seed", cfg.seed},
                          {"seeds", StageSeeds(cfg.seed).to_json()},
                          {"artifacts", list},
                          {"info", info.is_null() ? json::object() : info}};
    m["config_hash"] = cfg.hash();
    std::filesystem::create_directories(run_dir);
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw MissingInputError("cannot write " + tmp);
        out << m.dump(1) << '\n';
    }
    std::filesystem::rename(tmp, path);
}

std::vector<refdyn::Trajectory> read_trajectory_dir(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw MissingInputError("trajectory directory " + dir.string() + " not found");
    std::vector<std::filesystem::path> files;
    const auto index = dir / "grid.csv";
    if (std::filesystem::exists(index)) {
        std::ifstream in(index);
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto c1 = line.find(',');
            const auto c2 = line.find(',', c1 + 1);
            if (c1 == std::string::npos || c2 == std::string::npos) throw ConfigError(index.string() + ": malformed row");
            files.push_back(dir / line.substr(c1 + 1, c2 - c1 - 1));
        }
    } else {
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.path().extension() == ".csv" && e.path().filename().string().rfind("traj_", 0) == 0)
                files.push_back(e.path());
        std::sort(files.begin(), files.end());
    }
    if (files.empty()) throw MissingInputError("no trajectories in " + dir.string());
    std::vector<refdyn::Trajectory> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(refdyn::read_trajectory_csv(f));
    return out;
}

}  // namespace qdbench::cli
