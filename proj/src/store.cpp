#include "pbnn/store.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace pbnn {

std::string sha256_hex(const std::vector<unsigned char>& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
        throw std::runtime_error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

namespace {

// Little-endian binary writer/reader. Doubles are raw IEEE-754.
struct Writer {
    std::vector<unsigned char> buf;
    void u8(std::uint8_t v) { buf.push_back(v); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf.push_back((v >> (8 * i)) & 0xff);
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back((v >> (8 * i)) & 0xff);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u64(s.size());
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void tensor(const Tensor& t) {
        u32(std::uint32_t(t.shape.size()));
        for (auto d : t.shape) u64(d);
        for (double v : t.data) f64(v);
    }
};

struct Reader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;
    explicit Reader(const std::vector<unsigned char>& b) : buf(b) {}
    void need(std::size_t n) {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint payload truncated");
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos++]) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        std::size_t n = u64();
        need(n);
        std::string s(buf.begin() + pos, buf.begin() + pos + n);
        pos += n;
        return s;
    }
    Tensor tensor() {
        std::uint32_t nd = u32();
        if (nd == 0) return Tensor();  // parameterless layers store empty tensors
        std::vector<std::size_t> shape(nd);
        for (auto& d : shape) d = u64();
        Tensor t(shape);
        for (auto& v : t.data) v = f64();
        return t;
    }
};

void write_network(Writer& w, const Network& net) {
    w.u32(std::uint32_t(net.input_shape.size()));
    for (auto d : net.input_shape) w.u64(d);
    w.u32(std::uint32_t(net.layers.size()));
    for (const auto& layer : net.layers) {
        const LayerSpec& s = layer.spec;
        w.u8(std::uint8_t(s.kind));
        w.u8(std::uint8_t(s.activation));
        w.u64(s.out_width);
        w.u64(s.out_channels);
        w.u64(s.kernel_h);
        w.u64(s.kernel_w);
        w.u64(s.stride);
        w.u64(s.padding);
        w.u64(s.pool_k);
        w.f64(s.drop_rate);
        w.tensor(layer.weights);
        w.tensor(layer.bias);
        w.u32(std::uint32_t(layer.dendrites.size()));
        for (const auto& unit : layer.dendrites) {
            w.u32(std::uint32_t(unit.size()));
            for (const auto& dn : unit) {
                w.tensor(dn.input_weights);
                w.u32(std::uint32_t(dn.sibling_weights.size()));
                for (double v : dn.sibling_weights) w.f64(v);
                w.f64(dn.bias);
                w.u8(dn.has_bias ? 1 : 0);
                w.f64(dn.output_weight);
                w.u8(std::uint8_t(dn.activation));
                w.u32(std::uint32_t(dn.birth_cycle));
                w.u8(dn.input_frozen ? 1 : 0);
            }
        }
    }
}

Network read_network(Reader& r) {
    std::uint32_t nd = r.u32();
    std::vector<std::size_t> input_shape(nd);
    for (auto& d : input_shape) d = r.u64();
    std::uint32_t nl = r.u32();
    std::vector<LayerSpec> specs;
    struct RawLayer {
        Tensor weights, bias;
        std::vector<std::vector<DendriteNode>> dendrites;
    };
    std::vector<RawLayer> raw;
    for (std::uint32_t li = 0; li < nl; ++li) {
        LayerSpec s;
        s.kind = LayerKind(r.u8());
        s.activation = Activation(r.u8());
        s.out_width = r.u64();
        s.out_channels = r.u64();
        s.kernel_h = r.u64();
        s.kernel_w = r.u64();
        s.stride = r.u64();
        s.padding = r.u64();
        s.pool_k = r.u64();
        s.drop_rate = r.f64();
        RawLayer rl;
        rl.weights = r.tensor();
        rl.bias = r.tensor();
        std::uint32_t units = r.u32();
        rl.dendrites.resize(units);
        for (std::uint32_t u = 0; u < units; ++u) {
            std::uint32_t nden = r.u32();
            for (std::uint32_t d = 0; d < nden; ++d) {
                DendriteNode dn;
                dn.input_weights = r.tensor();
                std::uint32_t ns = r.u32();
                dn.sibling_weights.resize(ns);
                for (auto& v : dn.sibling_weights) v = r.f64();
                dn.bias = r.f64();
                dn.has_bias = r.u8() != 0;
                dn.output_weight = r.f64();
                dn.activation = Activation(r.u8());
                dn.birth_cycle = int(r.u32());
                dn.input_frozen = r.u8() != 0;
                rl.dendrites[u].push_back(std::move(dn));
            }
        }
        specs.push_back(s);
        raw.push_back(std::move(rl));
    }
    Network net = build_network(input_shape, specs);
    for (std::uint32_t li = 0; li < nl; ++li) {
        if (!same_shape(net.layers[li].weights, raw[li].weights))
            throw std::runtime_error("checkpoint parameter shapes inconsistent");
        net.layers[li].weights = std::move(raw[li].weights);
        net.layers[li].bias = std::move(raw[li].bias);
        if (!raw[li].dendrites.empty()) net.layers[li].dendrites = std::move(raw[li].dendrites);
    }
    return net;
}

constexpr char kMagic[4] = {'P', 'B', 'C', 'K'};

}  // namespace

std::vector<unsigned char> checkpoint_bytes(const Checkpoint& ck) {
    Writer payload;
    write_network(payload, ck.net);
    payload.u64(ck.optimizer_state.size());
    for (double v : ck.optimizer_state) payload.f64(v);
    payload.str(ck.rng_state);
    payload.u32(std::uint32_t(ck.cycle_index));

    Writer out;
    out.buf.insert(out.buf.end(), kMagic, kMagic + 4);
    out.u32(Checkpoint::kFormatVersion);
    out.u64(payload.buf.size());
    out.buf.insert(out.buf.end(), payload.buf.begin(), payload.buf.end());
    std::string digest = sha256_hex(payload.buf);
    out.buf.insert(out.buf.end(), digest.begin(), digest.end());
    return out.buf;
}

Checkpoint checkpoint_from_bytes(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("not a checkpoint file (bad magic)");
    Reader header(bytes);
    header.pos = 4;
    std::uint32_t version = header.u32();
    if (version != Checkpoint::kFormatVersion)
        throw std::runtime_error("checkpoint format version " + std::to_string(version) +
                                 " unsupported (want " +
                                 std::to_string(Checkpoint::kFormatVersion) + ")");
    std::uint64_t payload_len = header.u64();
    if (bytes.size() != 16 + payload_len + 64)
        throw std::runtime_error("checkpoint file length inconsistent");
    std::vector<unsigned char> payload(bytes.begin() + 16,
                                       bytes.begin() + 16 + payload_len);
    std::string stored(bytes.begin() + 16 + payload_len, bytes.end());
    if (sha256_hex(payload) != stored)
        throw std::runtime_error("checkpoint digest mismatch (corrupted payload)");

    Reader r(payload);
    Checkpoint ck;
    ck.net = read_network(r);
    std::uint64_t nopt = r.u64();
    ck.optimizer_state.resize(nopt);
    for (auto& v : ck.optimizer_state) v = r.f64();
    ck.rng_state = r.str();
    ck.cycle_index = int(r.u32());
    return ck;
}

std::string save_checkpoint(const Checkpoint& ck, const std::string& dir) {
    auto bytes = checkpoint_bytes(ck);
    // id = digest of the payload (stored at the tail of the file)
    std::string id(bytes.end() - 64, bytes.end());
    std::filesystem::create_directories(dir);
    std::string path = dir + "/" + id + ".ckpt";
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    if (!out) throw std::runtime_error(path + ": write failed");
    return id;
}

Checkpoint load_checkpoint(const std::string& dir, const std::string& id) {
    std::string path = dir + "/" + id + ".ckpt";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("unknown checkpoint id: " + id);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

std::string neuron_params_digest(const Network& net) {
    Writer w;
    for (const auto& layer : net.layers) {
        w.tensor(layer.weights);
        w.tensor(layer.bias);
    }
    return sha256_hex(w.buf);
}

std::string dendrite_input_digest(const Network& net) {
    Writer w;
    for (const auto& layer : net.layers)
        for (const auto& unit : layer.dendrites)
            for (const auto& dn : unit) {
                // unfrozen inputs (gd_dendrites ablation) legitimately train
                // during neuron cycles and are not part of the freeze contract
                if (!dn.input_frozen) continue;
                w.tensor(dn.input_weights);
                for (double v : dn.sibling_weights) w.f64(v);
                w.f64(dn.bias);
            }
    return sha256_hex(w.buf);
}

void append_metrics(const std::string& path, const std::string& json_line) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error(path + ": cannot open for append");
    out << json_line << "\n";
    if (!out) throw std::runtime_error(path + ": append failed");
}

}  // namespace pbnn
