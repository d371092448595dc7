// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

namespace bspde {

enum class Precision { Double, Single };

class Mlp;

/// Activations of one forward pass, needed by Mlp::backward.
struct MlpCache {
    std::vector<Eigen::MatrixXd> acts;   // double precision: input, hidden outputs, output
    std::vector<Eigen::MatrixXf> acts_f; // single precision counterpart
    const Mlp* owner = nullptr;
    bool valid = false;
};

/// Dense feedforward network, ReLU on hidden layers and identity output.
/// Parameters live in one contiguous vector, layer by layer: W_l stored
/// column-major (out x in), then b_l.
class Mlp {
public:
    Mlp() = default;
    /// Network with all parameters zero.
    explicit Mlp(std::vector<int> widths);
    /// He-uniform weights in +-(6/fan_in)^{1/2}, zero biases.
    static Mlp init(std::vector<int> widths, std::uint64_t seed);

    const std::vector<int>& widths() const { return widths_; }
    int layers() const { return static_cast<int>(widths_.size()) - 1; }
    int input_dim() const { return widths_.front(); }
    int output_dim() const { return widths_.back(); }
    Eigen::Index parameter_count() const { return params_.size(); }

    Eigen::VectorXd& params() { return params_; }
    const Eigen::VectorXd& params() const { return params_; }
    Eigen::Map<Eigen::MatrixXd> weight(int l);
    Eigen::Map<const Eigen::MatrixXd> weight(int l) const;
    Eigen::Map<Eigen::VectorXd> bias(int l);
    Eigen::Map<const Eigen::VectorXd> bias(int l) const;

    Precision precision = Precision::Double;

    /// x: input_dim x batch; returns output_dim x batch.
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpCache& cache) const;
    Eigen::VectorXd forward(const Eigen::VectorXd& x) const;

    /// Reverse pass for the cached forward pass. Adds the parameter gradient of
    /// sum(upstream .* output) to `grad` and optionally returns the input gradient.
    void backward(const MlpCache& cache, const Eigen::MatrixXd& upstream, Eigen::VectorXd& grad,
                  Eigen::MatrixXd* input_grad = nullptr) const;

private:
    std::vector<int> widths_;
    std::vector<Eigen::Index> offsets_;  // start of W_l in params_
    Eigen::VectorXd params_;
};

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(Eigen::Index n, AdamOptions options);

    /// One bias-corrected Adam update of params in place.
    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grads);
    long steps() const { return t_; }
    const AdamOptions& options() const { return options_; }

    Eigen::VectorXd m, v;

private:
    AdamOptions options_;
    long t_ = 0;
};

/// Checkpoint layout, little-endian: u64 number of widths, u64 widths, then
/// for every layer W row-major as f64 followed by b as f64.
void save_checkpoint(const Mlp& net, std::ostream& out);
Mlp load_checkpoint(std::istream& in);

}  // namespace bspde
