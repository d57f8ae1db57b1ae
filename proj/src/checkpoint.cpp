#include "mfi/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace mfi {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
  public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<std::uint8_t>& buffer() { return out_; }

  private:
    std::vector<std::uint8_t> out_;
};

class Reader {
  public:
    Reader(std::span<const std::uint8_t> bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    void need(std::size_t n, std::string_view what) const {
        if (n > end_ - pos_) {
            throw TruncationError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                                  std::to_string(pos_));
        }
    }
    std::uint32_t u32(std::string_view what) {
        need(4, what);
        std::uint32_t v;
        std::memcpy(&v, bytes_.data() + pos_, 4);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(std::string_view what) {
        need(8, what);
        std::uint64_t v;
        std::memcpy(&v, bytes_.data() + pos_, 8);
        pos_ += 8;
        return v;
    }
    std::string str(std::string_view what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void copy(void* dst, std::size_t n, std::string_view what) {
        need(n, what);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t pos() const { return pos_; }
    void seek(std::size_t p) { pos_ = p; }

  private:
    std::span<const std::uint8_t> bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

void write_map(Writer& w, const std::map<std::string, std::string>& m) {
    w.u32(static_cast<std::uint32_t>(m.size()));
    for (const auto& [k, v] : m) {
        w.str(k);
        w.str(v);
    }
}

std::map<std::string, std::string> read_map(Reader& r, std::string_view what) {
    std::map<std::string, std::string> m;
    const std::uint32_t n = r.u32(what);
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string k = r.str(what);
        std::string v = r.str(what);
        if (!m.emplace(std::move(k), std::move(v)).second) {
            throw CorruptionError("checkpoint: duplicate key in " + std::string(what));
        }
    }
    return m;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h) {
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(data));
}

const std::set<std::string>& Checkpoint::known_kinds() {
    static const std::set<std::string> kinds{"teacher", "meanflow", "meta", "stage", "hybrid"};
    return kinds;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
    Writer w;
    w.bytes(kMagic.data(), kMagic.size());
    w.u32(kVersion);
    w.str(kind);
    write_map(w, hyper);
    write_map(w, log);
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) w.u64(static_cast<std::uint64_t>(e));
        w.bytes(t.ptr(), static_cast<std::size_t>(t.numel()) * sizeof(float));
    }
    w.u64(fnv1a64(w.buffer()));
    return std::move(w.buffer());
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagic.size() + 4 + 8) {
        throw TruncationError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
    }
    if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
        throw CorruptionError("checkpoint: bad magic");
    }
    const std::size_t body_end = bytes.size() - 8;
    Reader r(bytes, body_end);
    r.seek(kMagic.size());
    const std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw VersionError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                           std::to_string(kVersion) + ")");
    }
    Checkpoint c;
    c.kind = r.str("kind");
    c.hyper = read_map(r, "hyperparameters");
    c.log = read_map(r, "log");
    const std::uint32_t count = r.u32("tensor count");
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str("tensor name");
        if (!seen.insert(name).second) throw CorruptionError("checkpoint: duplicate tensor '" + name + "'");
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw CorruptionError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape;
        std::uint64_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint64_t e = r.u64("tensor extent");
            if (e == 0 || e > (std::uint64_t{1} << 40) || n > (std::uint64_t{1} << 40) / e) {
                throw CorruptionError("checkpoint: tensor '" + name + "' has an invalid extent");
            }
            n *= e;
            shape.push_back(static_cast<std::int64_t>(e));
        }
        r.need(n * sizeof(float), "tensor payload");
        Tensor t(shape);
        r.copy(t.ptr(), n * sizeof(float), "tensor payload");
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (r.pos() != body_end) {
        throw CorruptionError("checkpoint: " + std::to_string(body_end - r.pos()) + " unexpected trailing bytes");
    }
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body_end, 8);
    const std::uint64_t actual = fnv1a64(bytes.first(body_end));
    if (stored != actual) {
        throw DigestError("checkpoint: digest mismatch (stored " + hex64(stored) + ", computed " + hex64(actual) + ")");
    }
    if (!known_kinds().contains(c.kind)) throw KindError("checkpoint: unknown model kind '" + c.kind + "'");
    return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    if (!known_kinds().contains(kind)) throw KindError("checkpoint: unknown model kind '" + kind + "'");
    const auto bytes = serialize();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write to '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(data);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path, std::string_view expected_kind) {
    Checkpoint c = load(path);
    if (c.kind != expected_kind) {
        throw KindError("checkpoint '" + path.string() + "' has kind '" + c.kind + "', expected '" +
                        std::string(expected_kind) + "'");
    }
    return c;
}

bool Checkpoint::has(std::string_view name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return true;
    }
    return false;
}

const Tensor& Checkpoint::tensor(std::string_view name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw FormatError("checkpoint has no tensor '" + std::string(name) + "'");
}

void Checkpoint::add(std::string name, Tensor value) {
    if (has(name)) throw FormatError("checkpoint: duplicate tensor '" + name + "'");
    value.set_requires_grad(false);
    tensors.emplace_back(std::move(name), std::move(value));
}

const std::string& Checkpoint::hyper_value(const std::string& key) const {
    auto it = hyper.find(key);
    if (it == hyper.end()) throw FormatError("checkpoint (" + kind + ") lacks hyperparameter '" + key + "'");
    return it->second;
}

void store_state(Checkpoint& ckpt, const nn::StateRefs& state) {
    for (const auto* p : state.params) ckpt.add(p->name, p->value);
    for (const auto& b : state.buffers) ckpt.add(b.name, *b.tensor);
}

void restore_state(const nn::StateRefs& state, const Checkpoint& ckpt) {
    std::size_t used = 0;
    const auto fetch = [&](const std::string& name, const Tensor& current) -> const Tensor& {
        const Tensor& t = ckpt.tensor(name);
        if (t.shape() != current.shape()) {
            throw FormatError("checkpoint tensor '" + name + "' has shape " + to_string(t.shape()) +
                              ", model expects " + to_string(current.shape()));
        }
        ++used;
        return t;
    };
    // Validate everything before writing anything.
    for (const auto* p : state.params) fetch(p->name, p->value);
    for (const auto& b : state.buffers) fetch(b.name, *b.tensor);
    if (used != ckpt.tensors.size()) {
        throw FormatError("checkpoint (" + ckpt.kind + ") has " + std::to_string(ckpt.tensors.size()) +
                          " tensors but the model has " + std::to_string(used));
    }
    for (auto* p : state.params) {
        const bool flag = p->value.requires_grad();
        p->value = ckpt.tensor(p->name);
        p->value.set_requires_grad(flag);
    }
    for (const auto& b : state.buffers) *b.tensor = ckpt.tensor(b.name);
}

namespace {

std::uint64_t hash_tensor(std::uint64_t h, std::string_view name, const Tensor& t) {
    h = fnv1a64({reinterpret_cast<const std::uint8_t*>(name.data()), name.size()}, h);
    return fnv1a64({reinterpret_cast<const std::uint8_t*>(t.ptr()), static_cast<std::size_t>(t.numel()) * 4}, h);
}

bool under(std::string_view name, std::span<const std::string> prefixes) {
    for (const auto& p : prefixes) {
        if (name.starts_with(p)) return true;
    }
    return false;
}

}  // namespace

std::uint64_t state_hash(const nn::StateRefs& state) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : state.params) h = hash_tensor(h, p->name, p->value);
    for (const auto& b : state.buffers) h = hash_tensor(h, b.name, *b.tensor);
    return h;
}

std::uint64_t state_hash(const nn::StateRefs& state, std::span<const std::string> prefixes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto* p : state.params) {
        if (under(p->name, prefixes)) h = hash_tensor(h, p->name, p->value);
    }
    for (const auto& b : state.buffers) {
        if (under(b.name, prefixes)) h = hash_tensor(h, b.name, *b.tensor);
    }
    return h;
}

}  // namespace mfi
