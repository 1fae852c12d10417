// Neural-network engine: layers, reverse-mode gradients, Adam, the benchmark architectures.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qdbench/datapipe.hpp"

namespace qdbench::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Activation { tanh, sigmoid, relu, linear };
enum class LayerKind { dense, conv1d, maxpool1d, rnn, lstm, gru, bidirectional, flatten };
enum class CellKind { rnn, lstm, gru };

std::string to_string(Activation a);
std::string to_string(LayerKind k);
std::string to_string(CellKind c);
Activation parse_activation(const std::string& s);
LayerKind parse_layer_kind(const std::string& s);
CellKind parse_cell_kind(const std::string& s);

struct LayerSpec {
    LayerKind kind{LayerKind::dense};
    int units{0};         // dense width or recurrent hidden length
    int kernels{0};       // conv1d
    int kernel_size{0};   // conv1d
    int stride{1};        // conv1d and maxpool1d
    int padding{0};       // conv1d
    int pool{2};          // maxpool1d
    CellKind cell{CellKind::rnn};  // bidirectional
    Activation activation{Activation::linear};
    bool return_sequences{true};

    static LayerSpec dense(int units, Activation a = Activation::relu);
    static LayerSpec conv1d(int kernels, int kernel_size, Activation a = Activation::relu, int stride = 1,
                            int padding = 0);
    static LayerSpec maxpool1d(int pool = 2, int stride = 2);
    static LayerSpec recurrent(CellKind cell, int units, bool return_sequences = true);
    static LayerSpec bidirectional(CellKind cell, int units, bool return_sequences = true);
    static LayerSpec flatten();
};

// Activations are stored as length x channels, row-major within a sample.
struct Shape {
    int length{1};
    int channels{1};
    int size() const { return length * channels; }
    bool operator==(const Shape&) const = default;
};

struct NetSpec {
    std::string name{"custom"};
    std::vector<LayerSpec> layers;
    int input_length{41};
    int input_channels{1};

    // Throws ConfigError on incompatible shapes or a head other than dense(1, linear).
    void validate() const;
    // Output shape of every layer (validates first).
    std::vector<Shape> shapes() const;
};

// Scalar parameters of one layer fed by `in`.
std::size_t layer_parameter_count(const LayerSpec& layer, Shape in);
std::size_t count_parameters(const NetSpec& spec);

// The 14 benchmark architectures by id ("1D CNN", "FFNN", "LSTM", ..., "BRNN"); case-insensitive,
// also accepts the lowercase cli ids (cnn1d, ffnn, lstm, ..., cbgru).
NetSpec architecture(const std::string& id, int input_length = 41);
const std::vector<std::string>& architecture_ids();

struct NetModel {
    NetSpec spec;
    Eigen::VectorXd parameters;
    std::uint64_t rng_seed{0};
};

// Xavier-uniform weights, zero biases.
NetModel build_model(const NetSpec& spec, std::uint64_t seed);
NetModel build_model(const std::string& architecture_id, std::uint64_t seed);

// One named parameter block per weight or bias array, in storage order.
struct ParameterBlock {
    std::size_t layer{0};
    std::string name;
    std::size_t rows{0}, cols{0}, offset{0};
};
std::vector<ParameterBlock> parameter_layout(const NetSpec& spec);

double predict(const NetModel& model, std::span<const double> window);
Eigen::VectorXd predict(const NetModel& model, const RowMatrix& windows);

// ---- single-layer operations (weights stored input-major: in x out) ----

Eigen::VectorXd dense_forward(const Eigen::VectorXd& x, const RowMatrix& w, const Eigen::VectorXd& b,
                              Activation f);

// x is T x C; w is (k*C) x K with row j*C + c holding tap j of input channel c.
RowMatrix conv1d_forward(const RowMatrix& x, const RowMatrix& w, const Eigen::VectorXd& b, int stride, int padding,
                         Activation f);

RowMatrix maxpool1d_forward(const RowMatrix& z, int pool, int stride);

// Gate blocks are laid out along the columns: LSTM (F, I, G, O), GRU (Z, R, G).
// `bh` is only used by the GRU (its second bias set).
struct CellParams {
    CellKind kind{CellKind::rnn};
    RowMatrix wx;  // m x gk
    RowMatrix wh;  // k x gk
    Eigen::VectorXd b;
    Eigen::VectorXd bh;

    int units() const { return static_cast<int>(wh.rows()); }
    static CellParams zeros(CellKind kind, int inputs, int units);
};

Eigen::VectorXd rnn_cell_step(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev, const CellParams& p);
std::pair<Eigen::VectorXd, Eigen::VectorXd> lstm_cell_step(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev,
                                                           const Eigen::VectorXd& c_prev, const CellParams& p);
Eigen::VectorXd gru_cell_step(const Eigen::VectorXd& x, const Eigen::VectorXd& h_prev, const CellParams& p);

// Full hidden-state sequence (T x k) of one direction; `reverse` runs from the last step.
RowMatrix recurrent_forward(const RowMatrix& x, const CellParams& p, bool reverse = false);
// Row t is [forward h_t, backward h_t].
RowMatrix bidirectional_forward(const RowMatrix& x, const CellParams& fwd, const CellParams& bwd);

// ---- training ----

struct TrainOpts {
    double learning_rate{1e-4};
    int batch_size{128};
    int epochs{30};
    double beta1{0.9};
    double beta2{0.999};
    double epsilon{1e-8};
    double clip_norm{0.0};  // global-norm clip, 0 disables
    std::uint64_t seed{0};

    void validate() const;
};

struct EpochRecord {
    int epoch{0};
    double train_mse{0.0}, val_mse{0.0}, train_mae{0.0}, val_mae{0.0};
};

struct LossHistory {
    std::vector<EpochRecord> epochs;
    void write_csv(const std::filesystem::path& path) const;
    static LossHistory read_csv(const std::filesystem::path& path);
};

struct TrainResult {
    NetModel model;
    LossHistory history;
    double wall_seconds{0.0};
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch Adam on the MSE. Training columns are means over the epoch's batches;
// validation columns are evaluated after the epoch (NaN when no validation set).
// Throws NumericalError naming epoch and batch on a non-finite loss.
TrainResult train(const NetModel& model, const data::Dataset& training, const data::Dataset* validation,
                  const TrainOpts& opts, const EpochCallback& on_epoch = {});

// Single Adam step on one batch; exposed for tests. Returns the batch MSE.
struct AdamState {
    Eigen::VectorXd m, v;
    long step{0};
};
double train_step(NetModel& model, AdamState& state, const RowMatrix& x, const Eigen::VectorXd& y,
                  const TrainOpts& opts);

// Loss and gradient of the batch MSE.
double loss_and_gradient(const NetModel& model, const RowMatrix& x, const Eigen::VectorXd& y,
                         Eigen::VectorXd& gradient);

struct GradientCheckResult {
    double max_relative_error{0.0};
    std::size_t checked{0};
    std::size_t worst_index{0};
    bool maxpool_tie{false};  // a pooling window had (near) equal maxima; the check is not meaningful there
};

// Analytic gradient of the one-sample squared error against central differences
// (fourth-order stencil). Relative error is |a - n| / max(|a|, |n|, floor).
// At most `max_checked` parameters are probed (seeded subsample), 0 means all.
GradientCheckResult gradient_check(const NetModel& model, const data::SlicedSample& sample, double epsilon = 1e-4,
                                   std::size_t max_checked = 0, std::uint64_t seed = 0, double floor = 1e-6);

// JSON header line (spec, seed, shape manifest) followed by one parameter per line.
void save_model(const NetModel& model, const std::filesystem::path& path);
NetModel load_model(const std::filesystem::path& path);

}  // namespace qdbench::nn
