#include "mimg/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "mimg/bench.hpp"
#include "mimg/checkpoint.hpp"
#include "mimg/dataset.hpp"
#include "mimg/quantize.hpp"
#include "mimg/training.hpp"

namespace mimg {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

struct CliOptions {
    std::string config_path;
    uint64_t seed = 0;
    int steps = 12;        // sampler steps
    int train_steps = 500; // optimizer steps for the train commands
    double cfg_scale = 3.0;
    double temperature = 1.0;
    double strength = 0.5;
    std::string mask_path;
    std::string out_dir = "out";
    std::string caption = "red circle light";
    int count = 16;    // gen-data sample count
    int n_images = 1;  // generate batch size
    int image_size = 32;
    int batch = 8;
    int accum = 1;
    double lr = 1e-3;
    double drop_prob = 0.1;
    int rank = 16;
    double alpha = 32.0;
    bool merge = false;
    int frames = 4;
    double dx = 1.0;
    double dy = 0.0;
    std::string batches = "1,8";
    int reps = 5;
    std::string data_dir;
    std::string from_path;
    std::string image_path;
};

// One flat schema shared by every subcommand; flags override these values.
void apply_config_key(CliOptions& o, const std::string& key, const json& v) {
    try {
        if (key == "seed") o.seed = v.get<uint64_t>();
        else if (key == "steps") { o.steps = v.get<int>(); o.train_steps = v.get<int>(); }
        else if (key == "cfg-scale") o.cfg_scale = v.get<double>();
        else if (key == "temperature") o.temperature = v.get<double>();
        else if (key == "strength") o.strength = v.get<double>();
        else if (key == "mask") o.mask_path = v.get<std::string>();
        else if (key == "out") o.out_dir = v.get<std::string>();
        else if (key == "caption") o.caption = v.get<std::string>();
        else if (key == "count") { o.count = v.get<int>(); o.n_images = v.get<int>(); }
        else if (key == "size") o.image_size = v.get<int>();
        else if (key == "batch") o.batch = v.get<int>();
        else if (key == "accum") o.accum = v.get<int>();
        else if (key == "lr") o.lr = v.get<double>();
        else if (key == "drop-prob") o.drop_prob = v.get<double>();
        else if (key == "rank") o.rank = v.get<int>();
        else if (key == "alpha") o.alpha = v.get<double>();
        else if (key == "merge") o.merge = v.get<bool>();
        else if (key == "frames") o.frames = v.get<int>();
        else if (key == "dx") o.dx = v.get<double>();
        else if (key == "dy") o.dy = v.get<double>();
        else if (key == "batches") o.batches = v.get<std::string>();
        else if (key == "reps") o.reps = v.get<int>();
        else if (key == "data") o.data_dir = v.get<std::string>();
        else if (key == "from") o.from_path = v.get<std::string>();
        else if (key == "image") o.image_path = v.get<std::string>();
        else throw UsageError("config: unknown key '" + key + "'");
    } catch (const json::exception&) {
        throw UsageError("config: bad value type for key '" + key + "'");
    }
}

// Config files load before CLI11 runs so explicit flags win by overwriting.
void preload_config(int argc, char** argv, CliOptions& o) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) path = argv[i + 1];
        else if (a.rfind("--config=", 0) == 0) path = a.substr(9);
    }
    if (path.empty()) return;
    std::ifstream f(path);
    if (!f) throw UsageError("config: cannot open '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw UsageError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config: top level must be a JSON object");
    for (const auto& [key, value] : j.items()) apply_config_key(o, key, value);
    o.config_path = path;
}

json options_echo(const CliOptions& o) {
    json j;
    j["seed"] = std::to_string(o.seed);
    j["steps"] = o.steps;
    j["train_steps"] = o.train_steps;
    j["cfg_scale"] = o.cfg_scale;
    j["temperature"] = o.temperature;
    j["strength"] = o.strength;
    j["mask"] = o.mask_path;
    j["out"] = o.out_dir;
    j["caption"] = o.caption;
    j["count"] = o.count;
    j["images"] = o.n_images;
    j["size"] = o.image_size;
    j["batch"] = o.batch;
    j["accum"] = o.accum;
    j["lr"] = o.lr;
    j["drop_prob"] = o.drop_prob;
    j["rank"] = o.rank;
    j["alpha"] = o.alpha;
    j["merge"] = o.merge;
    j["frames"] = o.frames;
    j["dx"] = o.dx;
    j["dy"] = o.dy;
    j["batches"] = o.batches;
    j["reps"] = o.reps;
    j["data"] = o.data_dir;
    j["from"] = o.from_path;
    j["image"] = o.image_path;
    return j;
}

void write_json_file(const fs::path& p, const json& j) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw FormatError("cannot open '" + p.string() + "' for writing");
    f << j.dump(2) << "\n";
}

// The replay contract: everything needed to rerun the command, no wall times.
void write_run_record(const CliOptions& o, const std::string& command,
                      const std::vector<std::string>& outputs,
                      const json& results = json::object()) {
    const json cfg = options_echo(o);
    json rec;
    rec["command"] = command;
    rec["config"] = cfg;
    rec["config_hash"] = hex64(fnv1a64(cfg.dump()));
    rec["version"] = kVersionString;
    rec["outputs"] = outputs;
    if (!results.empty()) rec["results"] = results;
    write_json_file(fs::path(o.out_dir) / "run_record.json", rec);
}

std::unique_ptr<Pipeline> make_pipeline(const CliOptions& o) {
    if (!o.from_path.empty()) {
        auto ck = load_checkpoint(o.from_path);
        return std::move(ck.pipeline);
    }
    PipelineConfig pc;
    pc.image_size = o.image_size;
    pc.init_seed = o.seed;
    return std::make_unique<Pipeline>(pc, dataset_vocabulary());
}

struct DiskDataset {
    std::vector<Image> images;
    std::vector<std::string> captions;
    std::vector<MicroConditioning> micros;
};

DiskDataset load_dataset_dir(const std::string& dir) {
    if (dir.empty()) throw UsageError("this command needs --data <dir>");
    const fs::path meta_path = fs::path(dir) / "metadata.json";
    std::ifstream f(meta_path);
    if (!f) throw FormatError("dataset: cannot open '" + meta_path.string() + "'");
    json meta;
    try {
        f >> meta;
    } catch (const json::exception& e) {
        throw FormatError("dataset: malformed metadata.json: " + std::string(e.what()));
    }
    DiskDataset d;
    for (const auto& e : meta) {
        d.images.push_back(read_ppm((fs::path(dir) / e.at("file").get<std::string>()).string()));
        d.captions.push_back(e.at("caption").get<std::string>());
        const auto& jm = e.at("micro");
        MicroConditioning m;
        m.orig_height = jm.at("orig_height").get<float>();
        m.orig_width = jm.at("orig_width").get<float>();
        m.crop_top = jm.at("crop_top").get<float>();
        m.crop_left = jm.at("crop_left").get<float>();
        m.quality = jm.at("quality").get<float>();
        d.micros.push_back(m);
    }
    if (d.images.empty()) throw FormatError("dataset: metadata lists no samples");
    return d;
}

std::vector<TrainItem> to_train_items(const DiskDataset& d, const Pipeline& pipe) {
    std::vector<TrainItem> items;
    items.reserve(d.images.size());
    for (size_t i = 0; i < d.images.size(); ++i)
        items.push_back({d.images[i], pipe.encode_caption(d.captions[i]), d.micros[i]});
    return items;
}

MicroConditioning inference_micro(const Pipeline& pipe) {
    MicroConditioning m;
    m.orig_height = static_cast<float>(pipe.cfg.image_size);
    m.orig_width = static_cast<float>(pipe.cfg.image_size);
    m.quality = 1.0f; // ask for the top of the quality scale
    return m;
}

SamplerConfig sampler_config(const CliOptions& o) {
    SamplerConfig sc;
    sc.steps = o.steps;
    sc.guidance = static_cast<float>(o.cfg_scale);
    sc.temperature = static_cast<float>(o.temperature);
    sc.seed = o.seed;
    sc.validate();
    return sc;
}

std::string indexed_name(const char* stem, int i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03d.ppm", stem, i);
    return buf;
}

// Simple wrap-around window over the loss history, mirroring the VQ trainer.
json loss_summary(const std::vector<double>& history) {
    const int window = std::min<size_t>(20, history.size());
    double first = 0, last = 0;
    for (int i = 0; i < window; ++i) {
        first += history[static_cast<size_t>(i)];
        last += history[history.size() - 1 - static_cast<size_t>(i)];
    }
    return {{"initial_loss", first / window}, {"final_loss", last / window},
            {"steps", history.size()}};
}

int cmd_gen_data(const CliOptions& o) {
    DatasetSpec spec;
    spec.image_size = o.image_size;
    spec.count = o.count;
    spec.seed = o.seed;
    const auto vocab = dataset_vocabulary();
    const int max_len = CondConfig{}.max_len;
    auto samples = gen_dataset(spec, vocab, max_len);

    fs::create_directories(o.out_dir);
    json meta = json::array();
    std::vector<std::string> outputs;
    for (size_t i = 0; i < samples.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%04d.ppm", static_cast<int>(i));
        write_ppm((fs::path(o.out_dir) / name).string(), samples[i].image);
        const auto& m = samples[i].micro;
        meta.push_back({{"file", name},
                        {"caption", samples[i].caption},
                        {"caption_ids", samples[i].caption_ids},
                        {"micro",
                         {{"orig_height", m.orig_height},
                          {"orig_width", m.orig_width},
                          {"crop_top", m.crop_top},
                          {"crop_left", m.crop_left},
                          {"quality", m.quality}}}});
        outputs.push_back(name);
    }
    write_json_file(fs::path(o.out_dir) / "metadata.json", meta);
    outputs.push_back("metadata.json");
    write_run_record(o, "gen-data", outputs);
    std::cout << "wrote " << samples.size() << " samples to " << o.out_dir << "\n";
    return 0;
}

int cmd_train_vq(const CliOptions& o) {
    auto data = load_dataset_dir(o.data_dir);
    auto pipe = make_pipeline(o);
    for (const auto& p : pipe->store.items())
        pipe->store.set_trainable(p.name, p.name.rfind("vq.", 0) == 0);

    VqTrainConfig tc;
    tc.steps = o.train_steps;
    tc.batch = o.batch;
    tc.lr = static_cast<float>(o.lr);
    Rng rng(o.seed);
    auto stats = train_vq(pipe->vq, pipe->store, data.images, tc, rng);

    fs::create_directories(o.out_dir);
    save_checkpoint((fs::path(o.out_dir) / "model.ckpt").string(), *pipe);
    write_run_record(o, "train-vq", {"model.ckpt"},
                     {{"initial_loss", stats.initial_smoothed},
                      {"final_loss", stats.final_smoothed}});
    std::cout << "vq loss " << stats.initial_smoothed << " -> " << stats.final_smoothed
              << ", saved " << o.out_dir << "/model.ckpt\n";
    return 0;
}

int run_mim_training(const CliOptions& o, Pipeline& pipe, AdamT<float>& opt, Rng& rng,
                     std::vector<double>& history) {
    auto data = load_dataset_dir(o.data_dir);
    auto items = to_train_items(data, pipe);

    TrainConfig tc;
    tc.steps = o.train_steps;
    tc.batch = o.batch;
    tc.grad_accum = o.accum;
    tc.lr = o.lr;
    tc.drop_prob = o.drop_prob;
    tc.seed = o.seed;
    tc.validate();

    const int eb = tc.effective_batch();
    size_t cursor = 0;
    const int report_every = std::max(1, tc.steps / 10);
    for (int s = 0; s < tc.steps; ++s) {
        std::vector<TrainItem> batch;
        batch.reserve(static_cast<size_t>(eb));
        for (int j = 0; j < eb; ++j) batch.push_back(items[cursor++ % items.size()]);
        auto met = train_step(pipe, batch, opt, tc, rng, s);
        history.push_back(met.loss);
        if ((s + 1) % report_every == 0 || s + 1 == tc.steps)
            std::cout << "step " << (s + 1) << "/" << tc.steps << " loss " << met.loss
                      << " acc " << met.accuracy << "\n";
    }
    return 0;
}

int cmd_train_mim(const CliOptions& o) {
    std::unique_ptr<Pipeline> pipe;
    std::optional<AdamT<float>> restored_opt;
    std::optional<Rng> restored_rng;
    if (!o.from_path.empty()) {
        auto ck = load_checkpoint(o.from_path);
        pipe = std::move(ck.pipeline);
        restored_opt = std::move(ck.adam);
        restored_rng = ck.rng;
    } else {
        pipe = make_pipeline(o);
    }
    pipe->freeze_vq(); // the token vocabulary is trained by train-vq, not here

    AdamT<float> opt = restored_opt.value_or(
        AdamT<float>(static_cast<float>(o.lr)));
    opt.set_learning_rate(static_cast<float>(o.lr));
    Rng rng = restored_rng.value_or(Rng(o.seed));

    std::vector<double> history;
    run_mim_training(o, *pipe, opt, rng, history);

    fs::create_directories(o.out_dir);
    save_checkpoint((fs::path(o.out_dir) / "model.ckpt").string(), *pipe, &opt, &rng);
    write_run_record(o, "train-mim", {"model.ckpt"}, loss_summary(history));
    return 0;
}

int cmd_finetune_lora(const CliOptions& o) {
    auto pipe = make_pipeline(o);
    pipe->freeze_all();

    Rng rng(o.seed);
    const bool already = !pipe->backbone.qkv_projections().empty() &&
                         pipe->backbone.qkv_projections().front()->lora;
    if (!already) {
        LoraConfig lc;
        lc.rank = o.rank;
        lc.alpha = o.alpha;
        attach_lora(pipe->backbone, pipe->store, lc, rng);
    } else {
        // resumed adapters stay trainable, everything else stays frozen
        for (const auto& p : pipe->store.items())
            pipe->store.set_trainable(p.name, p.name.find(".lora_") != std::string::npos);
    }

    AdamT<float> opt(static_cast<float>(o.lr));
    std::vector<double> history;
    run_mim_training(o, *pipe, opt, rng, history);

    int merged = 0;
    if (o.merge) merged = merge_lora(pipe->backbone, pipe->store);

    fs::create_directories(o.out_dir);
    save_checkpoint((fs::path(o.out_dir) / "model.ckpt").string(), *pipe, &opt, &rng);
    json results = loss_summary(history);
    results["merged_layers"] = merged;
    write_run_record(o, "finetune-lora", {"model.ckpt"}, results);
    return 0;
}

int cmd_generate(const CliOptions& o) {
    auto pipe = make_pipeline(o);
    const auto caption_ids = pipe->encode_caption(o.caption);
    const auto micro = inference_micro(*pipe);
    auto hooks = make_decode_hooks(*pipe, caption_ids, micro);
    const auto sc = sampler_config(o);
    const int grid = pipe->cfg.model.grid;
    const int mask_id = pipe->cfg.model.mask_id();

    fs::create_directories(o.out_dir);
    std::vector<std::string> outputs;
    if (o.n_images == 1) {
        auto tokens = generate(hooks, grid, grid, sc, mask_id);
        const auto name = indexed_name("gen", 0);
        write_ppm((fs::path(o.out_dir) / name).string(), pipe->vq.decode_image(tokens));
        outputs.push_back(name);
    } else {
        auto grids = generate_batch(hooks, grid, grid, o.n_images, sc, mask_id);
        for (size_t i = 0; i < grids.size(); ++i) {
            const auto name = indexed_name("gen", static_cast<int>(i));
            write_ppm((fs::path(o.out_dir) / name).string(), pipe->vq.decode_image(grids[i]));
            outputs.push_back(name);
        }
    }
    write_run_record(o, "generate", outputs);
    std::cout << "wrote " << outputs.size() << " image(s) to " << o.out_dir << "\n";
    return 0;
}

TokenGrid tokens_from_image_file(const Pipeline& pipe, const std::string& path) {
    const Image img = read_ppm(path);
    if (img.height != pipe.cfg.image_size || img.width != pipe.cfg.image_size)
        throw ShapeError("input image is " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + " but the model expects " +
                         std::to_string(pipe.cfg.image_size) + "x" +
                         std::to_string(pipe.cfg.image_size));
    return pipe.vq.encode_image(img);
}

int cmd_vary(const CliOptions& o) {
    auto pipe = make_pipeline(o);
    const auto source = tokens_from_image_file(*pipe, o.image_path);
    auto hooks = make_decode_hooks(*pipe, pipe->encode_caption(o.caption), inference_micro(*pipe));
    auto tokens = vary(hooks, source, o.strength, sampler_config(o), pipe->cfg.model.mask_id());

    fs::create_directories(o.out_dir);
    const auto name = indexed_name("vary", 0);
    write_ppm((fs::path(o.out_dir) / name).string(), pipe->vq.decode_image(tokens));
    write_run_record(o, "vary", {name});
    std::cout << "wrote " << o.out_dir << "/" << name << "\n";
    return 0;
}

int cmd_inpaint(const CliOptions& o) {
    auto pipe = make_pipeline(o);
    const auto source = tokens_from_image_file(*pipe, o.image_path);
    const Image mask_img = read_ppm(o.mask_path);
    if (mask_img.height != pipe->cfg.image_size || mask_img.width != pipe->cfg.image_size)
        throw ShapeError("mask extents do not match the model image size");
    std::vector<uint8_t> pixel_mask(static_cast<size_t>(mask_img.height) * mask_img.width);
    for (int y = 0; y < mask_img.height; ++y)
        for (int x = 0; x < mask_img.width; ++x) {
            const float* px = mask_img.pixel(y, x);
            pixel_mask[static_cast<size_t>(y) * mask_img.width + x] =
                (0.2126f * px[0] + 0.7152f * px[1] + 0.0722f * px[2]) > 0.5f;
        }

    auto hooks = make_decode_hooks(*pipe, pipe->encode_caption(o.caption), inference_micro(*pipe));
    auto tokens = inpaint(hooks, source, pixel_mask, mask_img.height, mask_img.width,
                          pipe->cfg.vq.factor, sampler_config(o), pipe->cfg.model.mask_id());

    fs::create_directories(o.out_dir);
    const auto name = indexed_name("inpaint", 0);
    write_ppm((fs::path(o.out_dir) / name).string(), pipe->vq.decode_image(tokens));
    write_run_record(o, "inpaint", {name});
    std::cout << "wrote " << o.out_dir << "/" << name << "\n";
    return 0;
}

int cmd_animate(const CliOptions& o) {
    auto pipe = make_pipeline(o);
    auto hooks = make_decode_hooks(*pipe, pipe->encode_caption(o.caption), inference_micro(*pipe));
    const int grid = pipe->cfg.model.grid;
    auto frames = animate(hooks, pipe->vq.codebook().value(), grid, grid, o.frames, o.dx, o.dy,
                          sampler_config(o), pipe->cfg.model.mask_id());

    fs::create_directories(o.out_dir);
    std::vector<std::string> outputs;
    for (size_t i = 0; i < frames.size(); ++i) {
        const auto name = indexed_name("frame", static_cast<int>(i));
        write_ppm((fs::path(o.out_dir) / name).string(), pipe->vq.decode_image(frames[i]));
        outputs.push_back(name);
    }
    write_run_record(o, "animate", outputs);
    std::cout << "wrote " << outputs.size() << " frames to " << o.out_dir << "\n";
    return 0;
}

int cmd_quantize(const CliOptions& o) {
    if (o.from_path.empty()) throw UsageError("quantize needs --from <checkpoint>");
    auto pipe = make_pipeline(o);
    auto rep = quantize_model(*pipe);

    fs::create_directories(o.out_dir);
    save_checkpoint((fs::path(o.out_dir) / "model.ckpt").string(), *pipe);
    write_run_record(o, "quantize", {"model.ckpt"},
                     {{"layers", rep.layers},
                      {"bytes_before", rep.bytes_before},
                      {"bytes_after", rep.bytes_after},
                      {"ratio", rep.ratio()}});
    std::cout << "quantized " << rep.layers << " layers, " << rep.bytes_before << " -> "
              << rep.bytes_after << " bytes (" << rep.ratio() << ")\n";
    return 0;
}

int cmd_bench(const CliOptions& o) {
    auto pipe = make_pipeline(o);
    BenchConfig bc;
    bc.batch_sizes.clear();
    std::istringstream ss(o.batches);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) bc.batch_sizes.push_back(std::stoi(tok));
    bc.reps = o.reps;
    bc.sampler = sampler_config(o);

    auto report = bench_throughput(*pipe, pipe->encode_caption(o.caption),
                                   inference_micro(*pipe), bc);

    fs::create_directories(o.out_dir);
    json timings;
    timings["steps"] = report.steps;
    timings["guidance"] = report.guidance;
    timings["version"] = kVersionString;
    timings["entries"] = json::array();
    json counts = json::array();
    for (const auto& e : report.entries) {
        timings["entries"].push_back({{"batch", e.batch},
                                      {"median_ms", e.median_ms},
                                      {"per_image_ms", e.per_image_ms},
                                      {"forwards", e.forwards}});
        counts.push_back({{"batch", e.batch}, {"forwards", e.forwards}});
        std::cout << "batch " << e.batch << ": " << e.median_ms << " ms total, "
                  << e.per_image_ms << " ms/image, " << e.forwards << " forwards\n";
    }
    // wall times live only here; the run record stays replay-deterministic
    write_json_file(fs::path(o.out_dir) / "bench_report.json", timings);
    write_run_record(o, "bench", {"bench_report.json"}, {{"forward_counts", counts}});
    return 0;
}

} // namespace

int cli_main(int argc, char** argv) {
    CliOptions o;
    try {
        preload_config(argc, argv, o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    CLI::App app{"masked-token text-to-image tools"};
    app.require_subcommand(1);

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "JSON config file; flags override its values");
        sub->add_option("--seed", o.seed, "random seed");
        sub->add_option("--out", o.out_dir, "output directory");
    };
    auto add_sampling = [&](CLI::App* sub) {
        sub->add_option("--steps", o.steps, "decode steps");
        sub->add_option("--cfg-scale", o.cfg_scale, "guidance scale");
        sub->add_option("--temperature", o.temperature, "sampling temperature");
        sub->add_option("--caption", o.caption, "caption text");
        sub->add_option("--from", o.from_path, "checkpoint to load");
        sub->add_option("--size", o.image_size, "image extent when no checkpoint is given");
    };
    auto add_training = [&](CLI::App* sub) {
        sub->add_option("--data", o.data_dir, "dataset directory from gen-data");
        sub->add_option("--steps", o.train_steps, "optimizer steps");
        sub->add_option("--batch", o.batch, "batch size");
        sub->add_option("--lr", o.lr, "learning rate");
        sub->add_option("--size", o.image_size, "image extent for a fresh model");
        sub->add_option("--from", o.from_path, "checkpoint to continue from");
    };

    int rc = 0;

    auto* gen_data = app.add_subcommand("gen-data", "render a procedural captioned dataset");
    add_common(gen_data);
    gen_data->add_option("--count", o.count, "number of samples");
    gen_data->add_option("--size", o.image_size, "sample extent");
    gen_data->callback([&] { rc = cmd_gen_data(o); });

    auto* train_vq_cmd = app.add_subcommand("train-vq", "train the token autoencoder");
    add_common(train_vq_cmd);
    add_training(train_vq_cmd);
    train_vq_cmd->callback([&] { rc = cmd_train_vq(o); });

    auto* train_mim = app.add_subcommand("train-mim", "train the masked token predictor");
    add_common(train_mim);
    add_training(train_mim);
    train_mim->add_option("--accum", o.accum, "gradient accumulation chunks");
    train_mim->add_option("--drop-prob", o.drop_prob, "condition dropout probability");
    train_mim->callback([&] { rc = cmd_train_mim(o); });

    auto* finetune = app.add_subcommand("finetune-lora", "low-rank adapter fine-tune");
    add_common(finetune);
    add_training(finetune);
    finetune->add_option("--rank", o.rank, "adapter rank");
    finetune->add_option("--alpha", o.alpha, "adapter scale numerator");
    finetune->add_flag("--merge", o.merge, "fold adapters into the base weights");
    finetune->add_option("--drop-prob", o.drop_prob, "condition dropout probability");
    finetune->callback([&] { rc = cmd_finetune_lora(o); });

    auto* generate_cmd = app.add_subcommand("generate", "sample images from a caption");
    add_common(generate_cmd);
    add_sampling(generate_cmd);
    generate_cmd->add_option("--count", o.n_images, "images per run");
    generate_cmd->callback([&] { rc = cmd_generate(o); });

    auto* vary_cmd = app.add_subcommand("vary", "re-imagine part of an existing image");
    add_common(vary_cmd);
    add_sampling(vary_cmd);
    vary_cmd->add_option("--image", o.image_path, "source image (PPM)")->required();
    vary_cmd->add_option("--strength", o.strength, "fraction of tokens re-imagined");
    vary_cmd->callback([&] { rc = cmd_vary(o); });

    auto* inpaint_cmd = app.add_subcommand("inpaint", "regenerate the masked region");
    add_common(inpaint_cmd);
    add_sampling(inpaint_cmd);
    inpaint_cmd->add_option("--image", o.image_path, "source image (PPM)")->required();
    inpaint_cmd->add_option("--mask", o.mask_path, "mask image (PPM, bright = regenerate)")
        ->required();
    inpaint_cmd->callback([&] { rc = cmd_inpaint(o); });

    auto* animate_cmd = app.add_subcommand("animate", "warp-and-repair frame sequence");
    add_common(animate_cmd);
    add_sampling(animate_cmd);
    animate_cmd->add_option("--frames", o.frames, "frame count");
    animate_cmd->add_option("--dx", o.dx, "latent shift per frame, x");
    animate_cmd->add_option("--dy", o.dy, "latent shift per frame, y");
    animate_cmd->callback([&] { rc = cmd_animate(o); });

    auto* quantize_cmd = app.add_subcommand("quantize", "int8-quantize a checkpoint");
    add_common(quantize_cmd);
    quantize_cmd->add_option("--from", o.from_path, "checkpoint to quantize")->required();
    quantize_cmd->callback([&] { rc = cmd_quantize(o); });

    auto* bench_cmd = app.add_subcommand("bench", "batch-throughput measurement");
    add_common(bench_cmd);
    add_sampling(bench_cmd);
    bench_cmd->add_option("--batches", o.batches, "comma-separated batch sizes");
    bench_cmd->add_option("--reps", o.reps, "timed repetitions");
    bench_cmd->callback([&] { rc = cmd_bench(o); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}

int cli_run(const std::vector<std::string>& args) {
    std::vector<std::string> storage;
    storage.reserve(args.size() + 1);
    storage.push_back("mimg");
    for (const auto& a : args) storage.push_back(a);
    std::vector<char*> argv;
    argv.reserve(storage.size());
    for (auto& s : storage) argv.push_back(s.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

} // namespace mimg
