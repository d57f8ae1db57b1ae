#include "mfi/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "mfi/resnet.hpp"

namespace mfi {

namespace {

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) {
        throw ConfigError("config: '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: '" + std::string(key) + "' expects true or false, got '" + std::string(v) + "'");
}

std::array<float, 3> parse_triple(std::string_view key, std::string_view v) {
    std::array<float, 3> out{};
    std::size_t k = 0;
    while (true) {
        const auto comma = v.find(',');
        if (k == 3) throw ConfigError("config: '" + std::string(key) + "' expects three comma-separated values");
        out[k++] = parse_number<float>(key, trim(v.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        v.remove_prefix(comma + 1);
    }
    if (k != 3) throw ConfigError("config: '" + std::string(key) + "' expects three comma-separated values");
    return out;
}

template <class T>
void positive(std::string_view key, T v) {
    if (!(v > T{})) throw ConfigError("config: '" + std::string(key) + "' must be positive");
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;

void phase(std::map<std::string, Setter, std::less<>>& t, const std::string& name, PhaseConfig RunConfig::*field) {
    t[name + ".epochs"] = [field](RunConfig& c, auto k, auto v) {
        const int e = parse_number<int>(k, v);
        if (e < 0) throw ConfigError("config: '" + std::string(k) + "' must be non-negative");
        (c.*field).epochs = e;
    };
    t[name + ".lr"] = [field](RunConfig& c, auto k, auto v) {
        const float lr = parse_number<float>(k, v);
        positive(k, lr);
        (c.*field).lr = lr;
    };
}

const std::map<std::string, Setter, std::less<>>& setters() {
    static const auto table = [] {
        std::map<std::string, Setter, std::less<>> t;
        t["backbone"] = [](RunConfig& c, auto, auto v) {
            resnet::ResNetConfig::by_name(v, 10);
            c.backbone = std::string(v);
        };
        t["classes"] = [](RunConfig& c, auto k, auto v) {
            c.classes = parse_number<int>(k, v);
            if (c.classes < 2) throw ConfigError("config: 'classes' must be at least 2");
            c.dataset.classes = c.classes;
        };
        t["width"] = [](RunConfig& c, auto k, auto v) {
            c.width = parse_number<double>(k, v);
            positive(k, c.width);
        };
        t["zero_init_residual"] = [](RunConfig& c, auto k, auto v) { c.zero_init_residual = parse_bool(k, v); };
        t["seed"] = [](RunConfig& c, auto k, auto v) { c.seed = parse_number<std::uint64_t>(k, v); };
        t["out"] = [](RunConfig& c, auto, auto v) { c.out = std::string(v); };
        t["dataset.kind"] = [](RunConfig& c, auto, auto v) { c.dataset.kind = data::parse_dataset_kind(v); };
        t["dataset.root"] = [](RunConfig& c, auto, auto v) { c.dataset.root = std::string(v); };
        t["dataset.seed"] = [](RunConfig& c, auto k, auto v) { c.dataset.seed = parse_number<std::uint64_t>(k, v); };
        t["dataset.train_size"] = [](RunConfig& c, auto k, auto v) { c.dataset.train_size = parse_number<std::int64_t>(k, v); };
        t["dataset.val_size"] = [](RunConfig& c, auto k, auto v) { c.dataset.val_size = parse_number<std::int64_t>(k, v); };
        t["dataset.test_size"] = [](RunConfig& c, auto k, auto v) { c.dataset.test_size = parse_number<std::int64_t>(k, v); };
        t["dataset.image_size"] = [](RunConfig& c, auto k, auto v) {
            c.dataset.image_size = parse_number<std::int64_t>(k, v);
            positive(k, c.dataset.image_size);
        };
        t["dataset.separation"] = [](RunConfig& c, auto k, auto v) { c.dataset.separation = parse_number<double>(k, v); };
        t["dataset.noise"] = [](RunConfig& c, auto k, auto v) {
            c.dataset.noise = parse_number<double>(k, v);
            positive(k, c.dataset.noise);
        };
        t["augment.crop"] = [](RunConfig& c, auto k, auto v) { c.augment_crop = parse_bool(k, v); };
        t["augment.padding"] = [](RunConfig& c, auto k, auto v) { c.augment_padding = parse_number<int>(k, v); };
        t["augment.flip_prob"] = [](RunConfig& c, auto k, auto v) {
            c.augment_flip_prob = parse_number<double>(k, v);
            if (c.augment_flip_prob < 0.0 || c.augment_flip_prob > 1.0) {
                throw ConfigError("config: 'augment.flip_prob' must be in [0, 1]");
            }
        };
        t["augment.mean"] = [](RunConfig& c, auto k, auto v) {
            if (v == "auto") return;
            if (!c.norm) c.norm = data::ChannelNorm{};
            c.norm->mean = parse_triple(k, v);
        };
        t["augment.std"] = [](RunConfig& c, auto k, auto v) {
            if (v == "auto") return;
            if (!c.norm) c.norm = data::ChannelNorm{};
            c.norm->std = parse_triple(k, v);
            for (float s : c.norm->std) positive(k, s);
        };
        t["batch_size"] = [](RunConfig& c, auto k, auto v) {
            c.batch_size = parse_number<std::int64_t>(k, v);
            positive(k, c.batch_size);
        };
        t["eval_batch_size"] = [](RunConfig& c, auto k, auto v) {
            c.eval_batch_size = parse_number<std::int64_t>(k, v);
            positive(k, c.eval_batch_size);
        };
        t["weight_decay"] = [](RunConfig& c, auto k, auto v) { c.weight_decay = parse_number<float>(k, v); };
        t["label_smoothing"] = [](RunConfig& c, auto k, auto v) {
            c.label_smoothing = parse_number<float>(k, v);
            if (c.label_smoothing < 0.0f || c.label_smoothing >= 1.0f) {
                throw ConfigError("config: 'label_smoothing' must be in [0, 1)");
            }
        };
        phase(t, "teacher", &RunConfig::teacher);
        phase(t, "meanflow", &RunConfig::meanflow);
        phase(t, "meta", &RunConfig::meta);
        phase(t, "incubate", &RunConfig::incubate);
        phase(t, "global", &RunConfig::global);
        t["meanflow.hidden"] = [](RunConfig& c, auto k, auto v) {
            c.hidden = v == "auto" ? 0 : parse_number<std::int64_t>(k, v);
            if (c.hidden < 0) throw ConfigError("config: 'meanflow.hidden' must be positive or auto");
        };
        t["meanflow.embed_dim"] = [](RunConfig& c, auto k, auto v) {
            c.embed_dim = parse_number<std::int64_t>(k, v);
            if (c.embed_dim < 4 || c.embed_dim % 4 != 0) {
                throw ConfigError("config: 'meanflow.embed_dim' must be a positive multiple of 4");
            }
        };
        t["meanflow.jvp_mode"] = [](RunConfig& c, auto, auto v) { c.jvp_mode = meanflow::parse_jvp_mode(v); };
        t["time.mean"] = [](RunConfig& c, auto k, auto v) { c.time.mean = parse_number<double>(k, v); };
        t["time.std"] = [](RunConfig& c, auto k, auto v) {
            c.time.stddev = parse_number<double>(k, v);
            positive(k, c.time.stddev);
        };
        t["time.equal_fraction"] = [](RunConfig& c, auto k, auto v) {
            c.time.equal_fraction = parse_number<double>(k, v);
            if (c.time.equal_fraction < 0.0 || c.time.equal_fraction > 1.0) {
                throw ConfigError("config: 'time.equal_fraction' must be in [0, 1]");
            }
        };
        return t;
    }();
    return table;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
    const auto& t = setters();
    auto it = t.find(key);
    if (it == t.end()) throw ConfigError("config: unknown key '" + std::string(key) + "'");
    it->second(*this, key, value);
}

RunConfig RunConfig::parse(std::string_view text) {
    RunConfig c;
    c.dataset.classes = c.classes;
    int line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view l = line;
        if (const auto hash = l.find('#'); hash != std::string_view::npos) l = l.substr(0, hash);
        l = trim(l);
        if (l.empty()) continue;
        const auto eq = l.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = trim(l.substr(0, eq));
        const auto value = trim(l.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
        }
        try {
            c.set(key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return c;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string RunConfig::to_text() const {
    std::ostringstream o;
    o.precision(9);
    const auto triple = [](const std::array<float, 3>& a) {
        std::ostringstream s;
        s.precision(9);
        s << a[0] << "," << a[1] << "," << a[2];
        return s.str();
    };
    o << "backbone = " << backbone << "\n"
      << "classes = " << classes << "\n"
      << "width = " << width << "\n"
      << "zero_init_residual = " << (zero_init_residual ? "true" : "false") << "\n"
      << "seed = " << seed << "\n"
      << "out = " << out.string() << "\n"
      << "dataset.kind = " << data::to_string(dataset.kind) << "\n"
      << "dataset.root = " << dataset.root.string() << "\n"
      << "dataset.seed = " << dataset.seed << "\n"
      << "dataset.train_size = " << dataset.train_size << "\n"
      << "dataset.val_size = " << dataset.val_size << "\n"
      << "dataset.test_size = " << dataset.test_size << "\n"
      << "dataset.image_size = " << dataset.image_size << "\n"
      << "dataset.separation = " << dataset.separation << "\n"
      << "dataset.noise = " << dataset.noise << "\n"
      << "augment.crop = " << (augment_crop ? "true" : "false") << "\n"
      << "augment.padding = " << augment_padding << "\n"
      << "augment.flip_prob = " << augment_flip_prob << "\n"
      << "augment.mean = " << (norm ? triple(norm->mean) : "auto") << "\n"
      << "augment.std = " << (norm ? triple(norm->std) : "auto") << "\n"
      << "batch_size = " << batch_size << "\n"
      << "eval_batch_size = " << eval_batch_size << "\n"
      << "weight_decay = " << weight_decay << "\n"
      << "label_smoothing = " << label_smoothing << "\n";
    const auto ph = [&](const char* name, const PhaseConfig& p) {
        o << name << ".epochs = " << p.epochs << "\n" << name << ".lr = " << p.lr << "\n";
    };
    ph("teacher", teacher);
    ph("meanflow", meanflow);
    ph("meta", meta);
    ph("incubate", incubate);
    ph("global", global);
    o << "meanflow.hidden = " << (hidden == 0 ? std::string("auto") : std::to_string(hidden)) << "\n"
      << "meanflow.embed_dim = " << embed_dim << "\n"
      << "meanflow.jvp_mode = " << meanflow::to_string(jvp_mode) << "\n"
      << "time.mean = " << time.mean << "\n"
      << "time.std = " << time.stddev << "\n"
      << "time.equal_fraction = " << time.equal_fraction << "\n";
    return o.str();
}

}  // namespace mfi
