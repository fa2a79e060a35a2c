#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "shiftlic/image_io.hpp"
#include "shiftlic/metrics.hpp"
#include "shiftlic/training.hpp"

using namespace shiftlic;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Runs the installed binary through the shell; `prefix` lets tests set
// environment variables for the child only.
RunResult run_cli(const std::string& args, const std::string& prefix = "") {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "shiftlic_cli_io";
    fs::create_directories(d);
    return d;
  }();
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = prefix + " " + std::string(SHIFTLIC_CLI_PATH) + " " +
                          args + " > " + out.string() + " 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = (rc == -1) ? -1 : WEXITSTATUS(rc);
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

// First "key: value" occurrence in the output, parsed as a double.
double grab(const std::string& out, const std::string& key) {
  const auto pos = out.find(key);
  REQUIRE(pos != std::string::npos);
  return std::stod(out.substr(pos + key.size()));
}

struct Workspace {
  fs::path dir;
  fs::path image;
  fs::path ckpt;

  Workspace() {
    dir = fs::temp_directory_path() / "shiftlic_cli_ws";
    fs::remove_all(dir);
    fs::create_directories(dir);
    image = dir / "img.ppm";
    Rng r(77);
    write_ppm(image.string(), make_texture<float>(r, 40, 56));
    ckpt = dir / "tiny.ckpt";
    Model<float> m(ModelConfig::preset("tiny"), 12);
    save_checkpoint(m, ckpt.string());
  }
};

Workspace& ws() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("cli requires a subcommand and rejects unknown flags") {
  const auto none = run_cli("");
  REQUIRE(none.exit_code != 0);
  REQUIRE(none.err.rfind("error:", 0) == 0);

  const auto bogus = run_cli("encode --bogus");
  REQUIRE(bogus.exit_code != 0);
  REQUIRE(bogus.err.rfind("error:", 0) == 0);
}

TEST_CASE("cli trains a small model and logs a csv") {
  const auto csv = ws().dir / "train.csv";
  const auto out = ws().dir / "trained.ckpt";
  const auto r = run_cli("train --config tiny --steps 2 --patch 64 --seed 5 --csv " +
                         csv.string() + " --out " + out.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("final_loss:") != std::string::npos);
  REQUIRE(fs::exists(out));
  std::ifstream log(csv);
  std::string header;
  REQUIRE(std::getline(log, header));
  REQUIRE(header == "step,loss,rate_bpp,distortion,lr");
}

TEST_CASE("cli trains against one pinned image") {
  const auto csv = ws().dir / "overfit.csv";
  const auto out = ws().dir / "overfit.ckpt";
  const auto r = run_cli("train --config tiny --steps 2 --overfit " +
                         ws().image.string() + " --csv " + csv.string() +
                         " --out " + out.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(out));
}

TEST_CASE("environment seed beats the flag") {
  const auto csv = ws().dir / "seed.csv";
  const auto out = ws().dir / "seed.ckpt";
  const std::string tail = " --config tiny --steps 1 --patch 64 --csv " +
                           csv.string() + " --out " + out.string();
  const auto a = run_cli("train --seed 1" + tail, "SHIFTLIC_SEED=9");
  const auto b = run_cli("train --seed 2" + tail, "SHIFTLIC_SEED=9");
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  REQUIRE(grab(a.out, "final_loss:") == grab(b.out, "final_loss:"));
}

TEST_CASE("cli encode prints the on-disk rate") {
  const auto slic = ws().dir / "img.slic";
  const auto r = run_cli("encode --model " + ws().ckpt.string() + " --input " +
                         ws().image.string() + " --output " + slic.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(slic));
  const double printed = grab(r.out, "bpp:");
  const double expected = 8.0 * double(fs::file_size(slic)) / (40.0 * 56.0);
  REQUIRE(printed == Catch::Approx(expected).margin(5e-5));
  REQUIRE(r.out.find("encode_ms:") != std::string::npos);
}

TEST_CASE("cli encode is deterministic") {
  const auto a = ws().dir / "det_a.slic";
  const auto b = ws().dir / "det_b.slic";
  const std::string base = "encode --model " + ws().ckpt.string() + " --input " +
                           ws().image.string() + " --output ";
  REQUIRE(run_cli(base + a.string()).exit_code == 0);
  REQUIRE(run_cli(base + b.string()).exit_code == 0);
  REQUIRE(slurp(a) == slurp(b));
}

TEST_CASE("cli decode round trips and reports fidelity") {
  const auto slic = ws().dir / "img.slic";
  if (!fs::exists(slic)) {
    REQUIRE(run_cli("encode --model " + ws().ckpt.string() + " --input " +
                    ws().image.string() + " --output " + slic.string())
                .exit_code == 0);
  }
  const auto recon = ws().dir / "recon.ppm";
  const auto r = run_cli("decode --model " + ws().ckpt.string() + " --input " +
                         slic.string() + " --output " + recon.string() +
                         " --reference " + ws().image.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);

  const auto original = read_ppm<float>(ws().image.string());
  const auto decoded = read_ppm<float>(recon.string());
  REQUIRE(decoded.h() == original.h());
  REQUIRE(decoded.w() == original.w());

  const double printed = grab(r.out, "psnr_db:");
  REQUIRE(printed ==
          Catch::Approx(psnr_db(mse_255(original, decoded))).margin(1e-3));
}

TEST_CASE("cli decode of a truncated stream fails without partial output") {
  const auto slic = ws().dir / "img.slic";
  if (!fs::exists(slic)) {
    REQUIRE(run_cli("encode --model " + ws().ckpt.string() + " --input " +
                    ws().image.string() + " --output " + slic.string())
                .exit_code == 0);
  }
  const auto cut = ws().dir / "cut.slic";
  const std::string bytes = slurp(slic);
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() - 1);

  const auto broken = ws().dir / "broken.ppm";
  fs::remove(broken);
  const auto r = run_cli("decode --model " + ws().ckpt.string() + " --input " +
                         cut.string() + " --output " + broken.string());
  REQUIRE(r.exit_code != 0);
  REQUIRE(r.err.rfind("error:", 0) == 0);
  REQUIRE_FALSE(fs::exists(broken));
}

TEST_CASE("cli eval summarizes a folder") {
  const auto folder = ws().dir / "evalset";
  fs::create_directories(folder);
  Rng r(3);
  write_ppm((folder / "one.ppm").string(), make_texture<float>(r, 48, 48));
  write_ppm((folder / "two.ppm").string(), make_texture<float>(r, 32, 64));
  const auto csv = ws().dir / "eval.csv";
  const auto res = run_cli("eval --model " + ws().ckpt.string() + " --dir " +
                           folder.string() + " --csv " + csv.string());
  CAPTURE(res.err);
  REQUIRE(res.exit_code == 0);
  REQUIRE(grab(res.out, "images:") == 2.0);
  REQUIRE(res.out.find("mean_bpp:") != std::string::npos);
  std::ifstream parsed(csv);
  std::string header;
  REQUIRE(std::getline(parsed, header));
  REQUIRE(header == "image,bpp,psnr_db,msssim,msssim_db");
}

TEST_CASE("cli analyze prints totals and deviations") {
  const auto r = run_cli("analyze --config medium --size 768x512");
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("dev%") != std::string::npos);
  REQUIRE(r.out.find("total") != std::string::npos);
  REQUIRE(r.out.find("params_total:") != std::string::npos);
  REQUIRE(r.out.find("kmacs_per_pixel:") != std::string::npos);
}

TEST_CASE("cli rate comparison of identical sweeps is zero") {
  const auto curve = ws().dir / "curve.csv";
  {
    std::ofstream c(curve);
    c << "bpp,quality_db\n0.25,30\n0.5,33\n1.0,36\n2.0,39\n";
  }
  const auto r = run_cli("bdrate --anchor " + curve.string() + " --test " +
                         curve.string());
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.out.find("bd_rate: 0.00%") != std::string::npos);
}

TEST_CASE("cli analyze rejects a malformed size") {
  const auto r = run_cli("analyze --config tiny --size banana");
  REQUIRE(r.exit_code != 0);
  REQUIRE(r.err.rfind("error:", 0) == 0);
}
