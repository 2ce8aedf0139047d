#include "editlab/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace editlab {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'E', 'L', 'C', 'P'};
constexpr int kFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

struct NamedArray {
    std::string name;
    const Mat* mat = nullptr;
    const Vec* vec = nullptr;
    Eigen::Index rows() const { return mat ? mat->rows() : vec->size(); }
    Eigen::Index cols() const { return mat ? mat->cols() : 1; }
};

template <typename Model>
std::vector<NamedArray> named_arrays(Model& m) {
    std::vector<NamedArray> out;
    auto add_m = [&](std::string n, auto& mat) { out.push_back({std::move(n), &mat, nullptr}); };
    auto add_v = [&](std::string n, auto& vec) { out.push_back({std::move(n), nullptr, &vec}); };
    add_m("tok_emb", m.tok_emb);
    add_m("pos_emb", m.pos_emb);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto& L = m.layers[i];
        const std::string p = "layers." + std::to_string(i) + ".";
        add_m(p + "w_q", L.w_q);
        add_v(p + "b_q", L.b_q);
        add_m(p + "w_k", L.w_k);
        add_v(p + "b_k", L.b_k);
        add_m(p + "w_v", L.w_v);
        add_v(p + "b_v", L.b_v);
        add_m(p + "w_o", L.w_o);
        add_v(p + "b_o", L.b_o);
        add_v(p + "ln1_g", L.ln1_g);
        add_v(p + "ln1_b", L.ln1_b);
        add_v(p + "ln2_g", L.ln2_g);
        add_v(p + "ln2_b", L.ln2_b);
        add_m(p + "w_in", L.w_in);
        add_v(p + "b_in", L.b_in);
        add_m(p + "w_out", L.w_out);
        add_v(p + "b_out", L.b_out);
    }
    add_v("lnf_g", m.lnf_g);
    add_v("lnf_b", m.lnf_b);
    add_m("unembed", m.unembed);
    return out;
}

void append_row_major(std::string& payload, const NamedArray& a) {
    const Eigen::Index r = a.rows(), c = a.cols();
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) {
            const double v = a.mat ? (*a.mat)(i, j) : (*a.vec)(i);
            const char* b = reinterpret_cast<const char*>(&v);
            payload.append(b, sizeof(double));
        }
}

json config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                {"d_mlp", c.d_mlp},           {"max_seq_len", c.max_seq_len},
                {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

}  // namespace

void save_checkpoint(const ToyLM& model, const std::string& path) {
    const auto arrays = named_arrays(model);
    std::string payload;
    json index = json::array();
    for (const auto& a : arrays) {
        append_row_major(payload, a);
        index.push_back({{"name", a.name}, {"rows", a.rows()}, {"cols", a.cols()}});
    }
    json header{{"format_version", kFormatVersion},
                {"config", config_to_json(model.config)},
                {"arrays", index},
                {"payload_hash", to_hex(fnv1a64(payload.data(), payload.size()))}};
    const std::string head = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 4);
    const std::uint64_t hlen = head.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("short write: " + path);
}

ToyLM load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not an editlab checkpoint: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string head(hlen, '\0');
    f.read(head.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw IoError("truncated checkpoint header: " + path);

    json header = json::parse(head, nullptr, false);
    if (header.is_discarded()) throw IoError("corrupt checkpoint header: " + path);
    if (header.at("format_version").get<int>() != kFormatVersion)
        throw IoError("unsupported checkpoint format version in " + path);

    ModelConfig cfg = config_from_json(header.at("config"));
    cfg.validate();
    ToyLM model = ToyLM::init(cfg);  // shapes; contents overwritten below

    std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const std::string expect = header.at("payload_hash").get<std::string>();
    if (to_hex(fnv1a64(payload.data(), payload.size())) != expect)
        throw IoError("checkpoint payload hash mismatch: " + path);

    auto arrays = named_arrays(model);
    const json& index = header.at("arrays");
    if (index.size() != arrays.size()) throw IoError("checkpoint array count mismatch: " + path);
    std::size_t off = 0;
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        const auto& meta = index[i];
        auto& a = arrays[i];
        if (meta.at("name").get<std::string>() != a.name ||
            meta.at("rows").get<Eigen::Index>() != a.rows() ||
            meta.at("cols").get<Eigen::Index>() != a.cols())
            throw IoError("checkpoint array mismatch at " + a.name + ": " + path);
        const std::size_t n = static_cast<std::size_t>(a.rows() * a.cols()) * sizeof(double);
        if (off + n > payload.size()) throw IoError("truncated checkpoint payload: " + path);
        for (Eigen::Index r = 0; r < a.rows(); ++r)
            for (Eigen::Index c = 0; c < a.cols(); ++c) {
                double v;
                std::memcpy(&v, payload.data() + off, sizeof(double));
                off += sizeof(double);
                if (a.mat)
                    const_cast<Mat&>(*a.mat)(r, c) = v;
                else
                    const_cast<Vec&>(*a.vec)(r) = v;
            }
    }
    if (off != payload.size()) throw IoError("trailing bytes in checkpoint payload: " + path);
    if (!model.all_finite()) throw IoError("checkpoint contains non-finite weights: " + path);
    return model;
}

void save_matrices(const std::vector<std::pair<std::string, Mat>>& arrays,
                   const std::string& path) {
    std::string payload;
    json index = json::array();
    for (const auto& [name, m] : arrays) {
        NamedArray a{name, &m, nullptr};
        append_row_major(payload, a);
        index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    }
    json header{{"format_version", kFormatVersion},
                {"arrays", index},
                {"payload_hash", to_hex(fnv1a64(payload.data(), payload.size()))}};
    const std::string head = header.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open matrix dump for writing: " + path);
    f.write(kMagic, 4);
    const std::uint64_t hlen = head.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(head.data(), static_cast<std::streamsize>(head.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("short write: " + path);
}

std::vector<std::pair<std::string, Mat>> load_matrices(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open matrix dump: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not an editlab dump: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string head(hlen, '\0');
    f.read(head.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(head, nullptr, false);
    if (header.is_discarded()) throw IoError("corrupt dump header: " + path);
    std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (to_hex(fnv1a64(payload.data(), payload.size())) !=
        header.at("payload_hash").get<std::string>())
        throw IoError("dump payload hash mismatch: " + path);

    std::vector<std::pair<std::string, Mat>> out;
    std::size_t off = 0;
    for (const auto& meta : header.at("arrays")) {
        const auto rows = meta.at("rows").get<Eigen::Index>();
        const auto cols = meta.at("cols").get<Eigen::Index>();
        Mat m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) {
                if (off + sizeof(double) > payload.size())
                    throw IoError("truncated dump payload: " + path);
                std::memcpy(&m(r, c), payload.data() + off, sizeof(double));
                off += sizeof(double);
            }
        out.emplace_back(meta.at("name").get<std::string>(), std::move(m));
    }
    return out;
}

}  // namespace editlab
