#include "jvp_checks.hpp"

#include <algorithm>
#include <cmath>

#include "oracles.hpp"

namespace mfi::oracle {

double velocity_jvp_error(std::uint64_t seed) {
    SeededRng rng(seed);
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.below(7));
    const std::int64_t hidden = 4 + static_cast<std::int64_t>(rng.below(29));
    const std::int64_t embed = 4 * (1 + static_cast<std::int64_t>(rng.below(8)));
    meanflow::VelocityNet net("u", {c, hidden, embed}, rng);
    net.fc3.weight.value = rng.normal_tensor(net.fc3.weight.value.shape(), 0.0f, 0.3f);
    net.fc3.bias.value = rng.normal_tensor(net.fc3.bias.value.shape(), 0.0f, 0.3f);

    const std::int64_t n = 6;
    const Tensor z = rng.normal_tensor({n, c}, 0.0f, 1.0f);
    const Tensor dz = rng.normal_tensor({n, c}, 0.0f, 1.0f);
    Tensor r({n, 1}), t({n, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        const double a = rng.uniform(), b = rng.uniform();
        r[i] = static_cast<float>(std::min(a, b));
        t[i] = static_cast<float>(std::max(a, b));
    }
    const Tensor dr = rng.normal_tensor({n, 1}, 0.0f, 1.0f);
    const Tensor dt = rng.normal_tensor({n, 1}, 0.0f, 1.0f);

    const nn::DualMode m;
    const Dual u = net.forward(m, Dual(z, dz), Dual(r, dr), Dual(t, dt));
    const auto jvp = to_double(u.tangent_or_zero());

    std::vector<double> fd;
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<double> zi(static_cast<std::size_t>(c)), dzi(static_cast<std::size_t>(c));
        for (std::int64_t k = 0; k < c; ++k) {
            zi[static_cast<std::size_t>(k)] = z.at({i, k});
            dzi[static_cast<std::size_t>(k)] = dz.at({i, k});
        }
        const auto row = velocity_directional_fd(net, zi, r[i], t[i], dzi, dr[i], dt[i]);
        fd.insert(fd.end(), row.begin(), row.end());
    }
    return rel_error(jvp, fd);
}

double linear_field_error(meanflow::JvpMode mode, std::uint64_t seed) {
    SeededRng rng(seed);
    const std::int64_t c = 4, n = 8;
    const Tensor a = rng.normal_tensor({c, c}, 0.0f, 0.5f);
    const Tensor b = rng.normal_tensor({1, c}, 0.0f, 1.0f);
    const Tensor cc = rng.normal_tensor({1, c}, 0.0f, 1.0f);
    const Tensor d = rng.normal_tensor({1, c}, 0.0f, 1.0f);
    const Tensor a_t = transpose_last2(a);
    const meanflow::DualField field = [&](const Dual& z, const Dual& r, const Dual& t) {
        return add(add(add(matmul(z, Dual(a_t)), mul(r, b)), mul(t, cc)), d);
    };

    const Tensor z_t = rng.normal_tensor({n, c}, 0.0f, 1.0f);
    const Tensor v = rng.normal_tensor({n, c}, 0.0f, 1.0f);
    meanflow::TimeBatch times{Tensor({n, 1}), Tensor({n, 1})};
    for (std::int64_t i = 0; i < n; ++i) {
        times.t[i] = static_cast<float>(rng.uniform());
        times.r[i] = i % 3 == 0 ? times.t[i] : static_cast<float>(rng.uniform()) * times.t[i];
    }
    const Tensor got = meanflow::target_velocity(field, z_t, times, v, mode);

    double worst = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double gap = static_cast<double>(times.t[i]) - times.r[i];
        for (std::int64_t k = 0; k < c; ++k) {
            // d/dt u along the path: A (dz/dt) + c, with dz/dt = -v in full mode.
            double du = cc[k];
            if (mode == meanflow::JvpMode::Full) {
                for (std::int64_t j = 0; j < c; ++j) du -= static_cast<double>(a.at({k, j})) * v.at({i, j});
            }
            const double expect = v.at({i, k}) - gap * du;
            worst = std::max(worst, std::abs(expect - got.at({i, k})));
        }
    }
    return worst;
}

}  // namespace mfi::oracle
