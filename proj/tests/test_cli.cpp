#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "proteus/cli.hpp"

using namespace proteus;
namespace fs = std::filesystem;

namespace {

struct TempTree {
    fs::path root;
    explicit TempTree(const std::string& name) : root(fs::path("cli_scratch") / name) {
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~TempTree() { fs::remove_all(root); }
    std::string operator/(const std::string& leaf) const { return (root / leaf).string(); }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

int cli(std::initializer_list<std::string> args) { return run_cli(std::vector<std::string>(args)); }

std::string make_teacher(const TempTree& t, const std::string& data, int steps = 30) {
    std::string out = t / "teacher";
    REQUIRE(cli({"train-teacher", "--data", data, "-o", out, "--dim", "32", "--depth", "2",
                 "--heads", "4", "--probe-layers", "2", "--steps", std::to_string(steps),
                 "--warmup", "3", "--seed", "0"}) == 0);
    return out + "/checkpoint.prtc";
}

}  // namespace

TEST_CASE("make-dataset toy writes the requested container") {
    TempTree t("mkdata");
    std::string path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "10", "--per-class", "50", "--seed", "0",
                 "-o", path}) == 0);
    DatasetContainer ds = load_container(path);
    REQUIRE(ds.n == 500);
    REQUIRE(ds.class_count == 10);
}

TEST_CASE("make-dataset single and subsample and merge work through the CLI") {
    TempTree t("mkmore");
    std::string single_path = t / "single.pxds";
    REQUIRE(cli({"make-dataset", "single", "--count", "64", "--size", "16", "--seed", "1", "-o",
                 single_path}) == 0);
    DatasetContainer single = load_container(single_path);
    REQUIRE(single.n == 64);
    REQUIRE(!single.has_labels);

    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "4", "--per-class", "10", "--seed", "2", "-o",
                 toy_path}) == 0);
    std::string sub_path = t / "sub.pxds";
    REQUIRE(cli({"make-dataset", "subsample", "--input", toy_path, "--mode", "class-fraction",
                 "--fraction", "0.5", "--seed", "3", "-o", sub_path}) == 0);
    DatasetContainer sub = load_container(sub_path);
    REQUIRE(sub.class_count == 2);

    std::string merged_path = t / "merged.pxds";
    REQUIRE(cli({"make-dataset", "merge", "-i", toy_path, "-i", sub_path, "-o", merged_path}) == 0);
    DatasetContainer merged = load_container(merged_path);
    REQUIRE(merged.n == 40 + 20);
    REQUIRE(!merged.has_labels);
}

TEST_CASE("unknown flags and subcommands exit with code 2") {
    REQUIRE(cli({"frobnicate"}) == 2);
    REQUIRE(cli({"make-dataset", "toy", "--bogus-flag", "1", "-o", "x.pxds"}) == 2);
    REQUIRE(cli({}) == 2);
}

TEST_CASE("missing and corrupt checkpoints exit with code 3") {
    TempTree t("ckpt3");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "3", "--per-class", "8", "-o", toy_path}) == 0);
    REQUIRE(cli({"probe", "--checkpoint", t / "missing.prtc", "--data", toy_path, "-o",
                 t / "probe"}) == 3);
    std::string bad = t / "bad.prtc";
    std::ofstream(bad, std::ios::binary) << "PRTCjunk";
    REQUIRE(cli({"probe", "--checkpoint", bad, "--data", toy_path, "-o", t / "probe"}) == 3);
}

TEST_CASE("train-teacher emits config, metrics and a checkpoint") {
    TempTree t("teach");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "4", "--per-class", "8", "-o", toy_path}) == 0);
    std::string ckpt = make_teacher(t, toy_path, 12);
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(t / "teacher/config.json"));
    REQUIRE(fs::exists(t / "teacher/metrics.csv"));
    // the resolved config round-trips
    RunConfig cfg = RunConfig::from_file(t / "teacher/config.json");
    REQUIRE(cfg.mode == "train_teacher");
    REQUIRE(cfg.schedule.total_steps == 12);
    // checkpoint carries the model config and classifier
    Checkpoint ck = load_checkpoint(ckpt);
    TeacherBundle tb = teacher_meta(ck);
    REQUIRE(tb.cfg.dim == 32);
    REQUIRE(tb.classes == 4);
    REQUIRE(ck.find("head.weight") != nullptr);
    REQUIRE(ck.find("__opt__.step") != nullptr);
}

TEST_CASE("metrics files obey the strict schema") {
    TempTree t("metrics");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "3", "--per-class", "8", "-o", toy_path}) == 0);
    std::string ckpt = make_teacher(t, toy_path, 10);
    REQUIRE(cli({"distill", "--teacher", ckpt, "--data", toy_path, "-o", t / "dis",
                 "--student-dim", "16", "--student-heads", "2", "--student-probe-layers", "2",
                 "--steps", "8", "--warmup", "2", "--seed", "5", "--debug"}) == 0);
    std::istringstream in(read_file(t / "dis/metrics.csv"));
    std::string line;
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "# proteus-metrics-v1");
    REQUIRE(std::getline(in, line));
    REQUIRE(line == "step,epoch,lr,loss_token,loss_feat,loss_patch,loss_ce,loss_kl,loss_total,wall_ms");
    int64_t prev_step = -1;
    int rows = 0;
    while (std::getline(in, line)) {
        REQUIRE(line.find("nan") == std::string::npos);
        REQUIRE(line.find("inf") == std::string::npos);
        std::istringstream cells(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(cells, cell, ',')) vals.push_back(std::stod(cell));
        REQUIRE(vals.size() == 10);
        int64_t step = static_cast<int64_t>(vals[0]);
        REQUIRE(step > prev_step);
        prev_step = step;
        ++rows;
    }
    REQUIRE(rows == 8);
}

TEST_CASE("distill runs from a config file and is byte-deterministic") {
    TempTree t("det");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "4", "--per-class", "8", "-o", toy_path}) == 0);
    std::string ckpt = make_teacher(t, toy_path, 10);

    RunConfig cfg;
    cfg.mode = "distill";
    cfg.teacher_checkpoint = ckpt;
    cfg.data_path = toy_path;
    cfg.student.image_size = 16;
    cfg.student.patch_size = 4;
    cfg.student.channels = 1;
    cfg.student.dim = 16;
    cfg.student.depth = 2;
    cfg.student.heads = 2;
    cfg.student.layers_for_probe = 2;
    cfg.schedule.total_steps = 10;
    cfg.schedule.warmup_steps = 2;
    cfg.seed = 9;
    cfg.determinism = true;
    cfg.output_dir = t / "run_a";
    std::string config_path = t / "c.json";
    cfg.write_resolved(config_path);

    REQUIRE(cli({"distill", "--config", config_path, "-o", t / "run_a"}) == 0);
    REQUIRE(cli({"distill", "--config", config_path, "-o", t / "run_b"}) == 0);
    REQUIRE(read_file(t / "run_a/metrics.csv") == read_file(t / "run_b/metrics.csv"));
    // deployment checkpoint holds the student backbone only
    Checkpoint ck = load_checkpoint(t / "run_a/checkpoint.prtc");
    REQUIRE(ck.find("patch_embed.weight") != nullptr);
    REQUIRE(ck.find("head.weight") == nullptr);
    for (const auto& [name, tensor] : ck.tensors) REQUIRE(name.rfind("heads.", 0) != 0);
    // training state keeps heads and optimizer moments
    Checkpoint st = load_checkpoint(t / "run_a/train_state.prtc");
    REQUIRE(st.find("heads.cls.proj.weight") != nullptr);
    REQUIRE(st.find("__opt__.step") != nullptr);
}

TEST_CASE("config errors name the offending field and exit 2") {
    TempTree t("cfgerr");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "3", "--per-class", "6", "-o", toy_path}) == 0);
    // distill without a teacher
    REQUIRE(cli({"distill", "--data", toy_path, "-o", t / "x"}) == 2);
    // malformed config file
    std::string bad = t / "bad.json";
    std::ofstream(bad) << "{\"mode\": \"distill\", \"no_such_field\": 1}";
    REQUIRE(cli({"distill", "--config", bad}) == 2);
}

TEST_CASE("labels are never read in proteus mode") {
    TempTree t("labels");
    ToySpec spec;
    spec.classes = 4;
    spec.per_class = 8;
    spec.seed = 21;
    DatasetContainer ds = gen_toy_dataset(spec);
    std::string toy_path = t / "toy.pxds";
    save_container(ds, toy_path);
    std::string ckpt = make_teacher(t, toy_path, 10);

    RunConfig cfg;
    cfg.mode = "distill";
    cfg.teacher_checkpoint = ckpt;
    cfg.data_path = toy_path;
    cfg.student.image_size = 16;
    cfg.student.patch_size = 4;
    cfg.student.channels = 1;
    cfg.student.dim = 16;
    cfg.student.depth = 2;
    cfg.student.heads = 2;
    cfg.student.layers_for_probe = 2;
    cfg.schedule.total_steps = 6;
    cfg.schedule.warmup_steps = 1;
    cfg.seed = 4;
    cfg.output_dir = t / "proteus_run";
    DistillRunResult r = run_distill<float>(cfg);
    REQUIRE(r.label_reads == 0);

    cfg.loss_mode = "soft_ce";
    cfg.output_dir = t / "softce_run";
    DistillRunResult r2 = run_distill<float>(cfg);
    REQUIRE(r2.label_reads > 0);
}

TEST_CASE("probe CLI writes the grid and accuracies as JSON") {
    TempTree t("probe");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "4", "--per-class", "12", "-o", toy_path}) == 0);
    std::string ckpt = make_teacher(t, toy_path, 25);
    REQUIRE(cli({"probe", "--checkpoint", ckpt, "--data", toy_path, "-o", t / "p", "--seed",
                 "3"}) == 0);
    nlohmann::json j = nlohmann::json::parse(read_file(t / "p/probe.json"));
    REQUIRE(j.at("grid").size() == 45);
    REQUIRE(j.at("grid_accuracies").size() == 45);
    REQUIRE(j.at("grid")[0].get<double>() == 1e-6);
    REQUIRE(j.at("grid")[44].get<double>() == 1e3);
}

TEST_CASE("visualize-pca writes one tile per image") {
    TempTree t("vis");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "3", "--per-class", "6", "-o", toy_path}) == 0);
    std::string ckpt = make_teacher(t, toy_path, 8);
    REQUIRE(cli({"visualize-pca", "--checkpoint", ckpt, "--data", toy_path, "-o", t / "v",
                 "--images", "3", "--upscale", "4"}) == 0);
    for (int i = 0; i < 3; ++i) {
        std::string all = read_file(t / ("v/pca_" + std::to_string(i) + ".ppm"));
        REQUIRE(all.rfind("P6\n16 16\n255\n", 0) == 0);  // 4 patches/side x upscale 4
    }
}

TEST_CASE("weight inheritance through the CLI reports its selection") {
    TempTree t("inherit");
    std::string toy_path = t / "toy.pxds";
    REQUIRE(cli({"make-dataset", "toy", "--classes", "3", "--per-class", "6", "-o", toy_path}) == 0);
    std::string ckpt = make_teacher(t, toy_path, 8);
    REQUIRE(cli({"distill", "--teacher", ckpt, "--data", toy_path, "-o", t / "inh",
                 "--student-dim", "16", "--student-heads", "2", "--student-probe-layers", "2",
                 "--inherit", "--steps", "5", "--warmup", "1"}) == 0);
    std::string report = read_file(t / "inh/inherit.txt");
    REQUIRE(report.find("inherited") != std::string::npos);
}
