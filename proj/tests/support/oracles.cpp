#include "oracles.hpp"

#include <algorithm>
#include <numbers>

namespace mfi::oracle {

std::vector<double> to_double(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

double rel_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return INFINITY;
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

namespace {

std::vector<double> affine(const nn::Linear& l, const std::vector<double>& x) {
    const auto& w = l.weight.value;
    const std::int64_t out = w.dim(0), in = w.dim(1);
    std::vector<double> y(static_cast<std::size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
        double s = l.bias.value[o];
        for (std::int64_t i = 0; i < in; ++i) s += static_cast<double>(w[o * in + i]) * x[static_cast<std::size_t>(i)];
        y[static_cast<std::size_t>(o)] = s;
    }
    return y;
}

void relu_inplace(std::vector<double>& x) {
    for (auto& v : x) v = std::max(v, 0.0);
}

}  // namespace

std::vector<double> velocity_reference(const meanflow::VelocityNet& net, std::span<const double> z, double r,
                                       double t) {
    const auto& f = net.frequencies;
    const std::int64_t k = f.numel();
    std::vector<double> emb;
    for (double time : {r, t}) {
        for (std::int64_t i = 0; i < k; ++i) emb.push_back(std::sin(time * f[i]));
        for (std::int64_t i = 0; i < k; ++i) emb.push_back(std::cos(time * f[i]));
    }
    const auto mixed = affine(net.time_mix, emb);
    std::vector<double> in(z.begin(), z.end());
    in.insert(in.end(), mixed.begin(), mixed.end());
    auto h = affine(net.fc1, in);
    relu_inplace(h);
    h = affine(net.fc2, h);
    relu_inplace(h);
    return affine(net.fc3, h);
}

std::vector<double> velocity_directional_fd(const meanflow::VelocityNet& net, std::span<const double> z, double r,
                                            double t, std::span<const double> dz, double dr, double dt, double h) {
    std::vector<double> zp(z.begin(), z.end()), zm(z.begin(), z.end());
    for (std::size_t i = 0; i < z.size(); ++i) {
        zp[i] += h * dz[i];
        zm[i] -= h * dz[i];
    }
    const auto up = velocity_reference(net, zp, r + h * dr, t + h * dt);
    const auto down = velocity_reference(net, zm, r - h * dr, t - h * dt);
    std::vector<double> d(up.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = (up[i] - down[i]) / (2.0 * h);
    return d;
}

std::vector<double> conv2d_reference(const Tensor& x, const Tensor& w, std::int64_t stride, std::int64_t padding) {
    const std::int64_t b = x.dim(0), c = x.dim(1), hh = x.dim(2), ww = x.dim(3);
    const std::int64_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t oh = (hh + 2 * padding - kh) / stride + 1, ow = (ww + 2 * padding - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(b * o * oh * ow), 0.0);
    for (std::int64_t n = 0; n < b; ++n)
        for (std::int64_t co = 0; co < o; ++co)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t xx = 0; xx < ow; ++xx) {
                    double s = 0.0;
                    for (std::int64_t ci = 0; ci < c; ++ci)
                        for (std::int64_t i = 0; i < kh; ++i)
                            for (std::int64_t j = 0; j < kw; ++j) {
                                const std::int64_t iy = y * stride - padding + i, ix = xx * stride - padding + j;
                                if (iy < 0 || iy >= hh || ix < 0 || ix >= ww) continue;
                                s += static_cast<double>(x.at({n, ci, iy, ix})) * w.at({co, ci, i, j});
                            }
                    out[static_cast<std::size_t>(((n * o + co) * oh + y) * ow + xx)] = s;
                }
    return out;
}

SigmoidNormalCdf::SigmoidNormalCdf(double mean, double sd) : lo_(mean - 12.0 * sd), step_(sd * 1e-3) {
    const auto pdf = [&](double u) {
        const double z = (u - mean) / sd;
        return std::exp(-0.5 * z * z) / (sd * std::sqrt(2.0 * std::numbers::pi));
    };
    const int n = 24000;
    table_.assign(n + 1, 0.0);
    for (int i = 1; i <= n; ++i) {
        const double a = lo_ + step_ * (i - 1), b = a + step_;
        table_[i] = table_[i - 1] + step_ / 6.0 * (pdf(a) + 4.0 * pdf(0.5 * (a + b)) + pdf(b));
    }
}

double SigmoidNormalCdf::operator()(double x) const {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double u = std::log(x / (1.0 - x));
    const double pos = (u - lo_) / step_;
    if (pos <= 0.0) return 0.0;
    if (pos >= static_cast<double>(table_.size() - 1)) return table_.back();
    const auto i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    return table_[i] + frac * (table_[i + 1] - table_[i]);
}

double ks_statistic(std::vector<double> samples, const std::function<double(double)>& cdf) {
    std::sort(samples.begin(), samples.end());
    const double n = static_cast<double>(samples.size());
    double d = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const double f = cdf(samples[i]);
        d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
    }
    return d;
}

}  // namespace mfi::oracle
