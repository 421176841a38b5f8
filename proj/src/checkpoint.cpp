#include "mimg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "mimg/training.hpp"

namespace mimg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian and this build is not");

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'M', 'I', 'M', 'F'};

std::vector<const LinearLayerT<float>*> projection_layers(const UVitT<float>& m) {
    std::vector<const LinearLayerT<float>*> out;
    for (const auto& blk : m.blocks())
        for (const auto* l : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.cq, &blk.ck, &blk.cv,
                              &blk.co, &blk.fc1, &blk.fc2})
            out.push_back(l);
    return out;
}

void append_u32(std::string& out, uint32_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void append_u64(std::string& out, uint64_t v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

json config_to_json(const PipelineConfig& c) {
    json j;
    j["image_size"] = c.image_size;
    j["init_seed"] = std::to_string(c.init_seed);
    j["vq"] = {{"vocab", c.vq.vocab},
               {"dim", c.vq.dim},
               {"factor", c.vq.factor},
               {"channels", c.vq.channels}};
    j["cond"] = {{"embed_dim", c.cond.embed_dim},
                 {"max_len", c.cond.max_len},
                 {"micro_per_scalar", c.cond.micro_per_scalar},
                 {"drop_prob", c.cond.drop_prob}};
    j["model"] = {{"heads", c.model.heads},
                  {"dim", c.model.dim},
                  {"depth", c.model.depth},
                  {"conv_blocks", c.model.conv_blocks},
                  {"downsample", c.model.downsample}};
    return j;
}

PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    c.image_size = j.at("image_size").get<int>();
    c.init_seed = std::stoull(j.at("init_seed").get<std::string>());
    const auto& v = j.at("vq");
    c.vq.vocab = v.at("vocab").get<int>();
    c.vq.dim = v.at("dim").get<int>();
    c.vq.factor = v.at("factor").get<int>();
    c.vq.channels = v.at("channels").get<int>();
    const auto& d = j.at("cond");
    c.cond.embed_dim = d.at("embed_dim").get<int>();
    c.cond.max_len = d.at("max_len").get<int>();
    c.cond.micro_per_scalar = d.at("micro_per_scalar").get<int>();
    c.cond.drop_prob = d.at("drop_prob").get<double>();
    const auto& m = j.at("model");
    c.model.heads = m.at("heads").get<int>();
    c.model.dim = m.at("dim").get<int>();
    c.model.depth = m.at("depth").get<int>();
    c.model.conv_blocks = m.at("conv_blocks").get<int>();
    c.model.downsample = m.at("downsample").get<bool>();
    return c;
}

struct BlobWriter {
    std::string bytes;
    json manifest = json::array();

    void add_f32(const std::string& name, const std::vector<int>& shape,
                 const std::vector<float>& data) {
        json e;
        e["name"] = name;
        e["shape"] = shape;
        e["kind"] = "f32";
        e["offset"] = bytes.size();
        manifest.push_back(e);
        bytes.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
    }

    void add_i8(const std::string& name, const std::vector<int>& shape,
                const std::vector<int8_t>& data) {
        json e;
        e["name"] = name;
        e["shape"] = shape;
        e["kind"] = "i8";
        e["offset"] = bytes.size();
        manifest.push_back(e);
        bytes.append(reinterpret_cast<const char*>(data.data()), data.size());
    }
};

int64_t numel_of_shape(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

} // namespace

void save_checkpoint(const std::string& path, const PipelineT<float>& pipe,
                     const AdamT<float>* adam, const Rng* rng) {
    json header;
    header["config"] = config_to_json(pipe.cfg);
    header["vocab"] = pipe.vocab.tokens();

    std::set<std::string> quantized;
    for (const auto* l : projection_layers(pipe.backbone))
        if (l->quant) quantized.insert(l->name);

    bool any_lora = false;
    for (const auto& blk : pipe.backbone.blocks())
        for (const auto* l : {&blk.wq, &blk.wk, &blk.wv, &blk.cq, &blk.ck, &blk.cv})
            if (l->lora) {
                if (!any_lora) {
                    const int rank = l->lora_a.value().rows();
                    header["lora"] = {{"rank", rank},
                                      {"alpha", static_cast<double>(l->lora_scale) * rank}};
                    any_lora = true;
                }
            }

    BlobWriter w;
    for (const auto& p : pipe.store.items()) {
        const bool is_quantized_weight =
            p.name.size() > 2 && p.name.compare(p.name.size() - 2, 2, ".w") == 0 &&
            quantized.count(p.name.substr(0, p.name.size() - 2)) != 0;
        if (is_quantized_weight) continue;
        w.add_f32(p.name, p.var.value().shape, p.var.value().data);
    }
    json qlist = json::array();
    for (const auto* l : projection_layers(pipe.backbone)) {
        if (!l->quant) continue;
        qlist.push_back(l->name);
        w.add_i8(l->name + ".wq", {l->quant->out_dim, l->quant->in_dim}, l->quant->q);
        w.add_f32(l->name + ".scales", {l->quant->out_dim}, l->quant->scales);
    }
    if (!qlist.empty()) header["quantized"] = qlist;

    if (adam) {
        header["adam"] = {{"step_count", adam->step_count()},
                          {"lr", static_cast<double>(adam->learning_rate())},
                          {"beta1", static_cast<double>(adam->beta1())},
                          {"beta2", static_cast<double>(adam->beta2())},
                          {"eps", static_cast<double>(adam->eps())}};
        for (const auto& [name, slot] : adam->slots()) {
            w.add_f32("opt.m:" + name, slot.m.shape, slot.m.data);
            w.add_f32("opt.v:" + name, slot.v.shape, slot.v.data);
        }
    }
    if (rng) header["rng"] = std::to_string(rng->state());

    header["params"] = std::move(w.manifest);
    const std::string header_bytes = header.dump();

    std::string out;
    out.append(kMagic, 4);
    append_u32(out, kCheckpointVersion);
    append_u64(out, static_cast<uint64_t>(header_bytes.size()));
    out += header_bytes;
    out += w.bytes;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("checkpoint: short write to '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < 16) throw FormatError("checkpoint: file too short");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic bytes");
    uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported format version " + std::to_string(version));
    uint64_t header_len;
    std::memcpy(&header_len, bytes.data() + 8, 8);
    if (16 + header_len > bytes.size()) throw FormatError("checkpoint: truncated header");

    json header;
    try {
        header = json::parse(bytes.substr(16, header_len));
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
    }

    LoadedCheckpoint out;
    try {
        PipelineConfig cfg = config_from_json(header.at("config"));
        CaptionVocabulary vocab;
        const auto tokens = header.at("vocab").get<std::vector<std::string>>();
        if (tokens.size() < 2 || tokens[0] != CaptionVocabulary::kPadToken ||
            tokens[1] != CaptionVocabulary::kNullToken)
            throw FormatError("checkpoint: vocabulary is missing its reserved tokens");
        for (const auto& t : tokens) vocab.add(t);
        if (vocab.size() != static_cast<int>(tokens.size()))
            throw FormatError("checkpoint: duplicate vocabulary tokens");

        out.pipeline = std::make_unique<PipelineT<float>>(cfg, std::move(vocab));
        auto& pipe = *out.pipeline;

        if (header.contains("lora")) {
            LoraConfig lc;
            lc.rank = header["lora"].at("rank").get<int>();
            lc.alpha = header["lora"].at("alpha").get<double>();
            Rng scratch(0);
            attach_lora(pipe.backbone, pipe.store, lc, scratch);
        }

        std::set<std::string> quantized;
        if (header.contains("quantized"))
            for (const auto& q : header["quantized"]) quantized.insert(q.get<std::string>());
        out.quantized = !quantized.empty();

        if (header.contains("adam")) {
            const auto& ja = header["adam"];
            AdamT<float> a(static_cast<float>(ja.at("lr").get<double>()),
                           static_cast<float>(ja.at("beta1").get<double>()),
                           static_cast<float>(ja.at("beta2").get<double>()),
                           static_cast<float>(ja.at("eps").get<double>()));
            a.set_step_count(ja.at("step_count").get<int64_t>());
            out.adam = std::move(a);
        }
        if (header.contains("rng")) {
            Rng r(0);
            r.set_state(std::stoull(header["rng"].get<std::string>()));
            out.rng = r;
        }

        const size_t blob_start = 16 + header_len;
        std::map<std::string, std::pair<std::vector<int>, std::vector<int8_t>>> qweights;
        std::map<std::string, std::vector<float>> qscales;

        for (const auto& entry : header.at("params")) {
            const std::string name = entry.at("name").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<int>>();
            const std::string kind = entry.at("kind").get<std::string>();
            const uint64_t offset = entry.at("offset").get<uint64_t>();
            const int64_t count = numel_of_shape(shape);
            const size_t width = kind == "i8" ? 1 : sizeof(float);
            if (kind != "i8" && kind != "f32")
                throw FormatError("checkpoint: unknown blob kind '" + kind + "'");
            if (blob_start + offset + static_cast<uint64_t>(count) * width > bytes.size())
                throw FormatError("checkpoint: truncated blob for '" + name + "'");
            const char* src = bytes.data() + blob_start + offset;

            const bool quant_blob =
                (name.size() > 3 && name.compare(name.size() - 3, 3, ".wq") == 0 &&
                 quantized.count(name.substr(0, name.size() - 3))) ||
                (name.size() > 7 && name.compare(name.size() - 7, 7, ".scales") == 0 &&
                 quantized.count(name.substr(0, name.size() - 7)));
            if (quant_blob) {
                if (kind == "i8") {
                    std::vector<int8_t> q(static_cast<size_t>(count));
                    std::memcpy(q.data(), src, q.size());
                    qweights[name.substr(0, name.size() - 3)] = {shape, std::move(q)};
                } else {
                    std::vector<float> s(static_cast<size_t>(count));
                    std::memcpy(s.data(), src, s.size() * sizeof(float));
                    qscales[name.substr(0, name.size() - 7)] = std::move(s);
                }
                continue;
            }
            if (name.rfind("opt.m:", 0) == 0 || name.rfind("opt.v:", 0) == 0) {
                if (!out.adam) throw FormatError("checkpoint: optimizer blob without header");
                const bool is_m = name[4] == 'm';
                const std::string pname = name.substr(6);
                TensorT<float> t(shape);
                std::memcpy(t.data.data(), src, t.data.size() * sizeof(float));
                auto& slot = out.adam->slots()[pname];
                (is_m ? slot.m : slot.v) = std::move(t);
                continue;
            }
            if (!pipe.store.contains(name))
                throw FormatError("checkpoint: unknown parameter '" + name + "'");
            auto& value = pipe.store.get(name).var.node()->value;
            if (value.shape != shape)
                throw FormatError("checkpoint: shape mismatch for '" + name + "'");
            std::memcpy(value.data.data(), src, value.data.size() * sizeof(float));
        }

        for (auto* l : pipe.backbone.quantize_targets()) {
            if (!quantized.count(l->name)) continue;
            auto wit = qweights.find(l->name);
            auto sit = qscales.find(l->name);
            if (wit == qweights.end() || sit == qscales.end())
                throw FormatError("checkpoint: incomplete quantized blobs for '" + l->name + "'");
            auto q = std::make_shared<QuantizedLinearT<float>>();
            q->out_dim = wit->second.first.at(0);
            q->in_dim = wit->second.first.at(1);
            q->q = std::move(wit->second.second);
            q->scales = std::move(sit->second);
            if (static_cast<int>(q->scales.size()) != q->out_dim)
                throw FormatError("checkpoint: scale row count mismatch for '" + l->name + "'");
            l->quant = std::move(q);
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header field: ") + e.what());
    }
    return out;
}

} // namespace mimg
