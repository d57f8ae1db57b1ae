#pragma once

// Independent reference computations for the tests: finite differences,
// double-precision re-implementations and distribution statistics.

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mfi/meanflow.hpp"
#include "mfi/nn.hpp"

namespace mfi::oracle {

std::vector<double> to_double(const Tensor& t);

/// ||a - b|| / max(||a||, ||b||), with 0 when both vanish.
double rel_error(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Central-difference step; float32 forward noise rules out much smaller steps.
inline constexpr double kGradStep = 3e-3;

struct GradCheck {
    double worst = 0.0;
    std::string worst_name;
    int checked = 0;
    /// Coordinates whose finite difference straddled a relu kink.
    std::int64_t skipped = 0;
    std::int64_t coordinates = 0;

    void note(const std::string& name, double err) {
        ++checked;
        if (err > worst || worst_name.empty()) {
            worst = std::max(worst, err);
            worst_name = name;
        }
    }
};

/// Reverse-mode gradients of sum(w * f(x)) against central differences, for
/// every input and every listed parameter. `f` is called as f(mode, xs) with
/// xs a vector of the mode's values.
template <class F>
GradCheck grad_check(F&& f, std::vector<Tensor> inputs, std::vector<Parameter*> params, bool training,
                     std::uint64_t seed, double h = kGradStep) {
    for (auto* p : params) p->value.set_requires_grad(true);
    GradTape tape;
    const nn::TapeMode tm{&tape, training};
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    for (auto* p : params) tape.register_parameter(*p);
    const Var y = f(tm, leaves);
    SeededRng rng(seed);
    const Tensor w = rng.normal_tensor(y.shape(), 0.0f, 1.0f);
    const GradMap grads = tape.backward(sum_all(mul(y, w)));

    const auto objective = [&] {
        const nn::PlainMode pm{training};
        const Tensor out = f(pm, inputs);
        double s = 0.0;
        for (std::int64_t i = 0; i < out.numel(); ++i) s += static_cast<double>(out[i]) * w[i];
        return s;
    };
    // A relu kink within the step makes the central difference depend on the
    // step size, so coordinates where h and h/2 disagree are left out.
    GradCheck out;
    const auto central = [&](Tensor& target, std::int64_t i, double step) {
        const float keep = target[i];
        target[i] = static_cast<float>(keep + step);
        const double up = objective();
        target[i] = static_cast<float>(keep - step);
        const double down = objective();
        target[i] = keep;
        return (up - down) / (2.0 * step);
    };
    const auto compare = [&](const std::string& name, const Tensor& analytic, Tensor& target) {
        std::vector<double> a, n;
        for (std::int64_t i = 0; i < target.numel(); ++i) {
            const double full = central(target, i, h);
            const double half = central(target, i, 0.5 * h);
            ++out.coordinates;
            if (std::abs(full - half) > 2e-3 * std::max(std::abs(full), std::abs(half)) + 5e-4) {
                ++out.skipped;
                continue;
            }
            a.push_back(analytic[i]);
            n.push_back(full);
        }
        out.note(name, rel_error(a, n));
    };
    for (std::size_t i = 0; i < inputs.size(); ++i) compare("input" + std::to_string(i), tape.grad(leaves[i]), inputs[i]);
    for (auto* p : params) compare(p->name, grads.at(p->name), p->value);
    return out;
}

/// u(z, r, t) of a velocity net for one row, recomputed in double precision.
std::vector<double> velocity_reference(const meanflow::VelocityNet& net, std::span<const double> z, double r,
                                       double t);

/// Directional derivative of the reference velocity along (dz, dr, dt) by
/// central differences in double precision.
std::vector<double> velocity_directional_fd(const meanflow::VelocityNet& net, std::span<const double> z, double r,
                                            double t, std::span<const double> dz, double dr, double dt,
                                            double h = 1e-6);

/// Direct-loop convolution in double precision.
std::vector<double> conv2d_reference(const Tensor& x, const Tensor& w, std::int64_t stride, std::int64_t padding);

/// CDF of sigmoid(N(mean, sd^2)), tabulated by Simpson integration of the
/// normal density in logit space.
class SigmoidNormalCdf {
  public:
    SigmoidNormalCdf(double mean, double sd);
    double operator()(double x) const;

  private:
    double lo_, step_;
    std::vector<double> table_;
};

/// sup |F_n - F| of the sample against `cdf`.
double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf);

}  // namespace mfi::oracle
