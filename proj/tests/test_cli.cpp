#include <catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
};

Run run(const std::string& args) {
    const std::string cmd = std::string(SIMCROP_CLI_PATH) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::string out;
    char buf[4096];
    while (std::size_t n = fread(buf, 1, sizeof buf, p)) out.append(buf, n);
    const int status = pclose(p);
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

fs::path fresh(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    return p;
}

} // namespace

TEST_CASE("usage errors exit 1, help exits 0") {
    auto none = run("");
    CHECK(none.code == 1);
    CHECK(none.out.find("gen-data") != std::string::npos);
    CHECK(run("--help").code == 0);
    auto sub_help = run("pretrain --help");
    CHECK(sub_help.code == 0);
    CHECK(sub_help.out.find("--key=value") != std::string::npos);
    auto unknown_key = run("gen-data --bogus=1");
    CHECK(unknown_key.code == 1);
    CHECK(unknown_key.out.find("bogus") != std::string::npos);
    auto unknown_sub = run("frobnicate");
    CHECK(unknown_sub.code == 1);
    CHECK(unknown_sub.out.find("frobnicate") != std::string::npos);
    CHECK(run("gen-data --steps=abc").code == 1);
    CHECK(run("gen-data --config=/nonexistent/x.cfg").code == 1);
}

TEST_CASE("runtime errors exit 2") {
    const auto dir = fresh("simcrop_cli_missing");
    CHECK(run("probe --data_dir=" + dir.string() + " --checkpoint=random").code == 2);
}

TEST_CASE("gen-data is deterministic across reruns") {
    const auto a = fresh("simcrop_cli_gen_a"), b = fresh("simcrop_cli_gen_b");
    REQUIRE(run("gen-data --seed=7 --n=4 --data_dir=" + a.string()).code == 0);
    REQUIRE(run("gen-data --seed=7 --n=4 --data_dir=" + b.string()).code == 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a)) {
        CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
        ++files;
    }
    CHECK(files == 4 * 4 + 2);
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("tiny pretrain, resume, probe and visualize end to end") {
    const auto data = fresh("simcrop_cli_data"), out = fresh("simcrop_cli_out");
    const std::string geo = " --preset=tiny --data_dir=" + data.string() + " --out_dir=" + out.string();
    REQUIRE(run("gen-data" + geo + " --n=12").code == 0);
    auto pre = run("pretrain" + geo + " --steps=4 --batch_size=2 --checkpoint_every=2");
    INFO(pre.out);
    REQUIRE(pre.code == 0);
    CHECK(fs::exists(out / "checkpoint.bin"));
    CHECK(fs::exists(out / "checkpoint_step_2.bin"));
    CHECK(fs::exists(out / "config.txt"));
    std::istringstream csv(slurp(out / "losses.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    CHECK(line == "step,l_mim,l_align,l_mlm,l_total");
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == 4);

    auto probe = run("probe" + geo);
    INFO(probe.out);
    CHECK(probe.code == 0);
    CHECK(probe.out.find("macro_auc") != std::string::npos);
    CHECK(fs::exists(out / "features.bin"));
    CHECK(fs::exists(out / "probe.csv"));

    auto vis = run("visualize" + geo + " --sample_index=1 --sentence_index=0");
    INFO(vis.out);
    CHECK(vis.code == 0);
    CHECK(fs::exists(out / "heatmap" / "sample_00001_s0_topk.txt"));
    CHECK(fs::exists(out / "heatmap" / "sample_00001_s0_z00.pgm"));
    CHECK(run("visualize" + geo + " --sample_index=99").code == 2);

    // resuming the step-2 checkpoint reproduces the final checkpoint byte for byte
    const auto out2 = fresh("simcrop_cli_out2");
    auto res = run("pretrain --preset=tiny --steps=4 --batch_size=2 --data_dir=" + data.string() +
                   " --out_dir=" + out2.string() + " --checkpoint=" + (out / "checkpoint_step_2.bin").string());
    INFO(res.out);
    REQUIRE(res.code == 0);
    CHECK(slurp(out2 / "checkpoint.bin") == slurp(out / "checkpoint.bin"));

    // a checkpoint from a different model config is refused
    auto mismatch = run("pretrain --preset=tiny --steps=4 --batch_size=2 --enable_wl=false --data_dir=" +
                        data.string() + " --out_dir=" + out2.string() +
                        " --checkpoint=" + (out / "checkpoint.bin").string());
    CHECK(mismatch.code == 2);

    auto gc = run("grad-check");
    INFO(gc.out);
    CHECK(gc.code == 0);
    CHECK(gc.out.find("PASS") != std::string::npos);

    for (const auto& d : {data, out, out2}) fs::remove_all(d);
}
