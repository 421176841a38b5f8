#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "mimg/bench.hpp"
#include "mimg/cli.hpp"
#include "mimg/dataset.hpp"

using namespace mimg;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::path("/tmp/mimg_tooling") / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("ppm files round trip byte-grid images exactly") {
    Image img(5, 7);
    Rng rng(1);
    for (auto& v : img.rgb) v = snap_to_byte_grid(static_cast<float>(rng.uniform()));

    const auto dir = fresh_dir("ppm");
    const auto path = (dir / "img.ppm").string();
    write_ppm(path, img);

    const std::string bytes = slurp(path);
    CHECK(bytes.rfind("P6\n7 5\n255\n", 0) == 0);
    CHECK(bytes.size() == 11 + 5 * 7 * 3);

    Image back = read_ppm(path);
    REQUIRE(back.height == 5);
    REQUIRE(back.width == 7);
    for (size_t i = 0; i < img.rgb.size(); ++i) REQUIRE(back.rgb[i] == img.rgb[i]);

    // arbitrary floats still land within one quantization step
    Image rough(3, 3);
    for (auto& v : rough.rgb) v = static_cast<float>(rng.uniform());
    write_ppm(path, rough);
    back = read_ppm(path);
    for (size_t i = 0; i < rough.rgb.size(); ++i)
        CHECK(std::abs(back.rgb[i] - rough.rgb[i]) <= 0.5f / 255.f + 1e-6f);
}

TEST_CASE("ppm reader rejects malformed files") {
    const auto dir = fresh_dir("ppm_bad");
    auto write_bytes = [&](const std::string& bytes) {
        std::ofstream f(dir / "bad.ppm", std::ios::binary | std::ios::trunc);
        f << bytes;
    };
    write_bytes("P5\n2 2\n255\n" + std::string(12, '\0'));
    CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), FormatError);
    write_bytes("P6\n2 2\n255\n" + std::string(5, '\0')); // truncated payload
    CHECK_THROWS_AS(read_ppm((dir / "bad.ppm").string()), FormatError);
    CHECK_THROWS_AS(read_ppm((dir / "missing.ppm").string()), FormatError);
}

TEST_CASE("dataset generation is deterministic in the seed") {
    DatasetSpec spec;
    spec.image_size = 16;
    spec.count = 6;
    spec.seed = 99;
    const auto vocab = dataset_vocabulary();
    auto a = gen_dataset(spec, vocab, 8);
    auto b = gen_dataset(spec, vocab, 8);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].caption == b[i].caption);
        CHECK(a[i].caption_ids == b[i].caption_ids);
        REQUIRE(a[i].image.rgb.size() == b[i].image.rgb.size());
        for (size_t j = 0; j < a[i].image.rgb.size(); ++j)
            REQUIRE(a[i].image.rgb[j] == b[i].image.rgb[j]);
        CHECK(a[i].micro.crop_top == b[i].micro.crop_top);
        CHECK(a[i].micro.quality == b[i].micro.quality);
    }

    spec.seed = 100;
    auto c = gen_dataset(spec, vocab, 8);
    bool any_diff = false;
    for (size_t i = 0; i < a.size() && !any_diff; ++i)
        if (a[i].caption != c[i].caption || a[i].image.rgb != c[i].image.rgb) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("the attribute grammar spans all 18 combinations") {
    CHECK(dataset_shapes().size() == 3);
    CHECK(dataset_colors().size() == 3);
    CHECK(dataset_backgrounds().size() == 2);

    DatasetSpec spec;
    spec.image_size = 16;
    spec.count = 600;
    spec.seed = 5;
    auto samples = gen_dataset(spec, dataset_vocabulary(), 8);
    std::set<std::string> captions;
    for (const auto& s : samples) captions.insert(s.caption);
    CHECK(captions.size() == 18);
}

TEST_CASE("rendered attributes match their caption, histogram oracle") {
    // dead-center render, no crop, so the shape occupies a known area
    Image img = render_shape(32, "circle", "red", "light", 16.f, 16.f, 10.f);
    int red_dominant = 0, bright = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const float* px = img.pixel(y, x);
            if (px[0] > px[1] + 0.2f && px[0] > px[2] + 0.2f) ++red_dominant;
            if (0.2126f * px[0] + 0.7152f * px[1] + 0.0722f * px[2] > 0.7f) ++bright;
        }
    const double shape_frac = 3.14159 * 10.0 * 10.0 / (32.0 * 32.0);
    CHECK(red_dominant > 0.8 * shape_frac * 32 * 32);
    CHECK(red_dominant < 1.2 * shape_frac * 32 * 32);
    CHECK(bright > 32 * 32 * (1.0 - 1.2 * shape_frac));

    Image dark = render_shape(32, "square", "blue", "dark", 16.f, 16.f, 10.f);
    int blue_dominant = 0, dim = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const float* px = dark.pixel(y, x);
            if (px[2] > px[0] + 0.2f && px[2] > px[1] + 0.2f) ++blue_dominant;
            if (0.2126f * px[0] + 0.7152f * px[1] + 0.0722f * px[2] < 0.3f) ++dim;
        }
    CHECK(blue_dominant > 0);
    CHECK(dim > 32 * 32 / 2);

    CHECK_THROWS_AS(render_shape(16, "hexagon", "red", "light", 8, 8, 4), DomainError);
    CHECK_THROWS_AS(render_shape(16, "circle", "pink", "light", 8, 8, 4), DomainError);
}

TEST_CASE("micro records describe the crop that actually happened") {
    DatasetSpec spec;
    spec.image_size = 24;
    spec.count = 20;
    spec.seed = 11;
    auto samples = gen_dataset(spec, dataset_vocabulary(), 8);
    for (const auto& s : samples) {
        CHECK(s.micro.orig_height == spec.image_size + spec.margin);
        CHECK(s.micro.orig_width == spec.image_size + spec.margin);
        CHECK(s.micro.crop_top >= 0);
        CHECK(s.micro.crop_top <= spec.margin);
        CHECK(s.micro.crop_left >= 0);
        CHECK(s.micro.crop_left <= spec.margin);
        CHECK(s.micro.quality == quality_score(s.image));
        CHECK(s.micro.quality > 0.f); // a shape on a flat field always has contrast
        s.micro.validate();
        CHECK(s.image.height == 24);
        CHECK(s.caption_ids.size() == 8);
        CHECK(s.caption_ids[0] >= 2); // first word is a real token, not pad/null
    }
}

TEST_CASE("cli gen-data writes samples, metadata, and a run record") {
    const auto dir = fresh_dir("cli_gen_data");
    const auto out = (dir / "data").string();
    REQUIRE(cli_run({"gen-data", "--out", out, "--count", "5", "--size", "16", "--seed", "3"}) ==
            0);

    for (int i = 0; i < 5; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%04d.ppm", i);
        CHECK(fs::exists(fs::path(out) / name));
    }
    json meta = json::parse(slurp(fs::path(out) / "metadata.json"));
    REQUIRE(meta.size() == 5);
    CHECK(meta[0].contains("caption"));
    CHECK(meta[0]["micro"].contains("crop_top"));

    json rec = json::parse(slurp(fs::path(out) / "run_record.json"));
    CHECK(rec["command"] == "gen-data");
    CHECK(rec["version"] == kVersionString);
    CHECK(rec.contains("config_hash"));
    CHECK(rec["outputs"].size() == 6); // five samples plus metadata.json
    CHECK(rec["config"]["seed"] == "3");
}

TEST_CASE("cli generate is deterministic and honors config files") {
    const auto dir = fresh_dir("cli_generate");
    const auto a = (dir / "a").string(), b = (dir / "b").string(), c = (dir / "c").string();
    const std::vector<std::string> common = {"--seed", "7",  "--steps", "4",
                                             "--size", "16", "--cfg-scale", "2"};

    auto args = [&](const std::string& out) {
        std::vector<std::string> v = {"generate", "--out", out};
        v.insert(v.end(), common.begin(), common.end());
        return v;
    };
    REQUIRE(cli_run(args(a)) == 0);
    REQUIRE(cli_run(args(b)) == 0);
    CHECK(slurp(fs::path(a) / "gen_000.ppm") == slurp(fs::path(b) / "gen_000.ppm"));

    // same settings through a config file, overriding nothing
    const auto cfg_path = (dir / "cfg.json").string();
    {
        std::ofstream f(cfg_path);
        f << R"({"seed": 7, "steps": 4, "size": 16, "cfg-scale": 2.0})";
    }
    REQUIRE(cli_run({"generate", "--out", c, "--config", cfg_path}) == 0);
    CHECK(slurp(fs::path(a) / "gen_000.ppm") == slurp(fs::path(c) / "gen_000.ppm"));

    // a flag wins over the file
    const auto d = (dir / "d").string();
    REQUIRE(cli_run({"generate", "--out", d, "--config", cfg_path, "--seed", "8"}) == 0);
    CHECK(slurp(fs::path(a) / "gen_000.ppm") != slurp(fs::path(d) / "gen_000.ppm"));

    json rec = json::parse(slurp(fs::path(a) / "run_record.json"));
    CHECK(rec["command"] == "generate");
    CHECK(rec["outputs"] == json::array({"gen_000.ppm"}));
}

TEST_CASE("cli batch generate reproduces the single-image run") {
    const auto dir = fresh_dir("cli_batch");
    const auto one = (dir / "one").string(), many = (dir / "many").string();
    const std::vector<std::string> base = {"--seed", "9", "--steps", "4", "--size", "16"};
    std::vector<std::string> a1 = {"generate", "--out", one};
    a1.insert(a1.end(), base.begin(), base.end());
    std::vector<std::string> a3 = {"generate", "--out", many, "--count", "3"};
    a3.insert(a3.end(), base.begin(), base.end());
    REQUIRE(cli_run(a1) == 0);
    REQUIRE(cli_run(a3) == 0);
    CHECK(slurp(fs::path(one) / "gen_000.ppm") == slurp(fs::path(many) / "gen_000.ppm"));
    CHECK(fs::exists(fs::path(many) / "gen_002.ppm"));
}

TEST_CASE("cli usage errors exit 2, runtime errors exit 1") {
    const auto dir = fresh_dir("cli_errors");
    CHECK(cli_run({"inpaint", "--image", "x.ppm"}) == 2);         // --mask missing
    CHECK(cli_run({"generate", "--no-such-flag"}) == 2);          // unknown flag
    CHECK(cli_run({"no-such-command"}) == 2);                     // unknown subcommand
    CHECK(cli_run({}) == 2);                                      // subcommand required

    const auto bad_cfg = (dir / "bad.json").string();
    {
        std::ofstream f(bad_cfg);
        f << R"({"not-a-key": 1})";
    }
    CHECK(cli_run({"generate", "--config", bad_cfg, "--out", (dir / "o").string()}) == 2);

    // runtime failures: unreadable inputs, unknown caption words
    CHECK(cli_run({"vary", "--image", (dir / "missing.ppm").string(), "--out",
                   (dir / "o").string(), "--size", "16"}) == 1);
    CHECK(cli_run({"generate", "--caption", "mauve dodecahedron", "--out",
                   (dir / "o").string(), "--size", "16", "--steps", "2"}) == 1);
    CHECK(cli_run({"quantize", "--from", (dir / "missing.ckpt").string(), "--out",
                   (dir / "o").string()}) == 1);
}

TEST_CASE("cli vary, inpaint, and animate produce images from a source") {
    const auto dir = fresh_dir("cli_edit");
    const auto gen = (dir / "gen").string();
    REQUIRE(cli_run({"generate", "--out", gen, "--seed", "2", "--steps", "4", "--size", "16"}) ==
            0);
    const auto src = (fs::path(gen) / "gen_000.ppm").string();

    // an all-dark mask regenerates nothing: output decodes the source tokens
    Image mask(16, 16);
    const auto mask_path = (dir / "mask.ppm").string();
    write_ppm(mask_path, mask);
    const auto inp = (dir / "inp").string();
    REQUIRE(cli_run({"inpaint", "--image", src, "--mask", mask_path, "--out", inp, "--seed", "4",
                     "--steps", "4", "--size", "16"}) == 0);
    CHECK(fs::exists(fs::path(inp) / "inpaint_000.ppm"));

    const auto var = (dir / "var").string();
    REQUIRE(cli_run({"vary", "--image", src, "--strength", "0.5", "--out", var, "--seed", "4",
                     "--steps", "4", "--size", "16"}) == 0);
    CHECK(fs::exists(fs::path(var) / "vary_000.ppm"));

    const auto anim = (dir / "anim").string();
    REQUIRE(cli_run({"animate", "--frames", "2", "--out", anim, "--seed", "4", "--steps", "4",
                     "--size", "16"}) == 0);
    CHECK(fs::exists(fs::path(anim) / "frame_000.ppm"));
    CHECK(fs::exists(fs::path(anim) / "frame_001.ppm"));
    json rec = json::parse(slurp(fs::path(anim) / "run_record.json"));
    CHECK(rec["outputs"].size() == 2);
}

TEST_CASE("bench reports one entry per batch size with exact forward counts") {
    CaptionVocabulary vocab = dataset_vocabulary();
    PipelineConfig pc;
    pc.image_size = 16;
    pc.init_seed = 12;
    Pipeline pipe(pc, vocab);

    BenchConfig bc;
    bc.batch_sizes = {1, 2};
    bc.reps = 3;
    bc.warmup = 1;
    bc.sampler.steps = 3;
    bc.sampler.guidance = 2.0f;
    bc.sampler.seed = 1;

    auto caption = pipe.encode_caption("red circle light");
    MicroConditioning micro;
    micro.orig_height = 16;
    micro.orig_width = 16;
    auto report = bench_throughput(pipe, caption, micro, bc);

    REQUIRE(report.entries.size() == 2);
    for (const auto& e : report.entries) {
        CHECK(e.forwards == 6); // 2T with guidance on
        CHECK(e.median_ms > 0);
        CHECK(e.per_image_ms == doctest::Approx(e.median_ms / e.batch));
    }
    CHECK(report.entries[0].batch == 1);
    CHECK(report.entries[1].batch == 2);

    bc.sampler.guidance = 1.0f; // guidance off halves the model evaluations
    auto plain = bench_throughput(pipe, caption, micro, bc);
    CHECK(plain.entries[0].forwards == 3);

    bc.batch_sizes = {};
    CHECK_THROWS_AS(bench_throughput(pipe, caption, micro, bc), ConfigError);
}

TEST_CASE("cli bench splits timing data from the replay record") {
    const auto dir = fresh_dir("cli_bench");
    const auto out = (dir / "b").string();
    REQUIRE(cli_run({"bench", "--out", out, "--size", "16", "--steps", "2", "--batches", "1,2",
                     "--reps", "1", "--seed", "5"}) == 0);

    json bench = json::parse(slurp(fs::path(out) / "bench_report.json"));
    REQUIRE(bench["entries"].size() == 2);
    CHECK(bench["entries"][0]["median_ms"].get<double>() > 0);

    json rec = json::parse(slurp(fs::path(out) / "run_record.json"));
    CHECK(rec["command"] == "bench");
    CHECK(rec["results"]["forward_counts"].size() == 2);
    CHECK(rec.dump().find("median_ms") == std::string::npos); // no wall times here
}
