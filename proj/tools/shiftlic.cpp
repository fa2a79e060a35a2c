// Command-line front end: train, encode, decode, eval, analyze, bdrate.
// Every command reads its inputs, writes any outputs to separate paths, and
// prints machine-parseable "key: value" lines. Errors leave one line on
// stderr prefixed with "error:" and a nonzero exit code.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "shiftlic/analysis.hpp"
#include "shiftlic/training.hpp"

using namespace shiftlic;

namespace {

using Clock = std::chrono::steady_clock;

long elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0)
      .count();
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  require(!s.empty() && s.find_first_not_of("0123456789") == std::string::npos,
          what + ": expected an unsigned integer, got '" + s + "'");
  return std::stoull(s);
}

std::uint64_t seed_with_env(std::uint64_t flag_seed) {
  if (const char* env = std::getenv("SHIFTLIC_SEED"))
    return parse_u64(env, "SHIFTLIC_SEED");
  return flag_seed;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw Error("config: override '" + key + "' expects a boolean, got '" + v + "'");
}

// key=value overrides on top of a named preset.
void apply_override(ModelConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  require(eq != std::string::npos && eq > 0,
          "config: override must look like key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq);
  const std::string val = kv.substr(eq + 1);
  auto as_int = [&]() -> std::int64_t {
    try {
      std::size_t used = 0;
      const long long x = std::stoll(val, &used);
      require(used == val.size(), "junk");
      return x;
    } catch (...) {
      throw Error("config: override '" + key + "' expects an integer, got '" +
                  val + "'");
    }
  };
  if (key == "n")
    cfg.n = as_int();
  else if (key == "m")
    cfg.m = as_int();
  else if (key == "hyper_width")
    cfg.hyper_width = as_int();
  else if (key == "stage_width0")
    cfg.stage_widths[0] = as_int();
  else if (key == "stage_width1")
    cfg.stage_widths[1] = as_int();
  else if (key == "stage_width2")
    cfg.stage_widths[2] = as_int();
  else if (key == "stage_width3")
    cfg.stage_widths[3] = as_int();
  else if (key == "ssb_per_stage")
    cfg.ssb_per_stage = int(as_int());
  else if (key == "hyper_ssb_a")
    cfg.hyper_ssb_a = int(as_int());
  else if (key == "hyper_ssb_s")
    cfg.hyper_ssb_s = int(as_int());
  else if (key == "shift_groups")
    cfg.shift_groups = int(as_int());
  else if (key == "shift_step")
    cfg.shift_step = int(as_int());
  else if (key == "shuffle_groups")
    cfg.shuffle_groups = int(as_int());
  else if (key == "cra_enabled")
    cfg.cra_enabled = parse_bool(val, key);
  else if (key == "ssb_shift_enabled")
    cfg.ssb_shift_enabled = parse_bool(val, key);
  else if (key == "ssb_conv2_enabled")
    cfg.ssb_conv2_enabled = parse_bool(val, key);
  else if (key == "cra_shuffle_enabled")
    cfg.cra_shuffle_enabled = parse_bool(val, key);
  else if (key == "cra_local_enabled")
    cfg.cra_local_enabled = parse_bool(val, key);
  else
    throw Error("config: unknown override '" + key + "'");
}

ModelConfig build_config(const std::string& preset,
                         const std::vector<std::string>& sets) {
  ModelConfig cfg = ModelConfig::preset(preset);
  for (const auto& kv : sets) apply_override(cfg, kv);
  cfg.validate();
  return cfg;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "cannot open '" + path + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  return buf;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), "cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(buf.data()),
            std::streamsize(buf.size()));
  require(bool(out), "short write to '" + path + "'");
}

Metric parse_metric(const std::string& name) {
  if (name == "mse") return Metric::kMse;
  if (name == "msssim") return Metric::kMsssim;
  throw Error("train: metric must be mse or msssim, got '" + name + "'");
}

std::pair<std::int64_t, std::int64_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  require(x != std::string::npos && x > 0 && x + 1 < s.size(),
          "analyze: size must look like 768x512, got '" + s + "'");
  const std::int64_t w = std::int64_t(parse_u64(s.substr(0, x), "width"));
  const std::int64_t h = std::int64_t(parse_u64(s.substr(x + 1), "height"));
  require(w > 0 && h > 0, "analyze: size must be positive");
  return {h, w};
}

RdCurve read_curve(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "cannot open '" + path + "'");
  RdCurve c;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const char first = line[0];
    if (!std::isdigit(static_cast<unsigned char>(first)) && first != '.' &&
        first != '-')
      continue;  // header or comment
    std::istringstream row(line);
    RdPoint p;
    char comma = 0;
    row >> p.bpp >> comma >> p.quality_db;
    require(bool(row) && comma == ',',
            "curve '" + path + "': expected bpp,quality_db, got '" + line + "'");
    c.points.push_back(p);
  }
  require(!c.points.empty(), "curve '" + path + "': no data rows");
  return c;
}

double deviation_pct(double counted, const Rational& closed) {
  const double ref = closed.to_double();
  if (ref == 0) return 0;
  return 100.0 * (counted - ref) / ref;
}

void print_report(const ComplexityReport& rep, std::ostream& out, bool csv) {
  const char* head = csv
      ? "layer,closed_params,params,param_dev_pct,closed_macs,macs,mac_dev_pct\n"
      : nullptr;
  if (csv) {
    out << head;
  } else {
    out << std::left << std::setw(16) << "layer" << std::right << std::setw(15)
        << "closed_params" << std::setw(12) << "params" << std::setw(10)
        << "dev%" << std::setw(16) << "closed_macs" << std::setw(14) << "macs"
        << std::setw(10) << "dev%" << "\n";
  }
  auto line = [&](const std::string& name, const Rational& cw, double w,
                  const Rational& cm, double m) {
    const double dw = deviation_pct(w, cw);
    const double dm = deviation_pct(m, cm);
    if (csv) {
      out << name << ',' << cw.to_double() << ',' << std::uint64_t(w) << ','
          << dw << ',' << cm.to_double() << ',' << std::uint64_t(m) << ','
          << dm << "\n";
    } else {
      out << std::left << std::setw(16) << name << std::right << std::fixed
          << std::setprecision(1) << std::setw(15) << cw.to_double()
          << std::setw(12) << std::uint64_t(w) << std::setprecision(2)
          << std::setw(10) << dw << std::setprecision(1) << std::setw(16)
          << cm.to_double() << std::setw(14) << std::uint64_t(m)
          << std::setprecision(2) << std::setw(10) << dm << "\n";
      out.unsetf(std::ios::fixed);
    }
  };
  for (const auto& r : rep.rows)
    line(r.name, r.closed_weights, double(r.weights), r.closed_macs,
         double(r.macs));
  line("total", rep.total_closed_weights, double(rep.total_weights),
       rep.total_closed_macs, double(rep.total_macs));
}

int cmd_train(const std::string& preset, const std::vector<std::string>& sets,
              const TrainConfig& base, int lambda_index,
              const std::string& metric_name, const std::string& overfit_path) {
  TrainConfig tc = base;
  tc.metric = parse_metric(metric_name);
  if (lambda_index >= 0) tc.lambda = lambda_for_index(tc.metric, lambda_index);
  tc.seed = seed_with_env(tc.seed);

  const ModelConfig cfg = build_config(preset, sets);
  Model<float> model(cfg, tc.seed);

  Tensor<float> pinned;
  const Tensor<float>* fixed = nullptr;
  if (!overfit_path.empty()) {
    pinned = pad_replicate(read_ppm<float>(overfit_path), cfg.pad_multiple());
    fixed = &pinned;
  }

  const TrainResult res = train_loop(model, tc, &std::cout, fixed);
  if (res.aborted) throw Error("train aborted: " + res.abort_reason);
  std::cout << "steps: " << res.steps_run << "\n"
            << "first_loss: " << res.first_loss << "\n"
            << "final_loss: " << res.final_loss << "\n"
            << "final_rate_bpp: " << res.final_rate_bpp << "\n"
            << "final_distortion: " << res.final_distortion << "\n"
            << "csv: " << tc.csv_path << "\n"
            << "checkpoint: " << tc.checkpoint_path << "\n";
  return 0;
}

int cmd_encode(const std::string& model_path, const std::string& input,
               const std::string& output, int lambda_index) {
  Model<float> model = load_checkpoint<float>(model_path);
  const Tensor<float> image = read_ppm<float>(input);
  const auto t0 = Clock::now();
  Codec<float> codec(model);
  const std::uint8_t tag =
      lambda_index < 0 ? kLambdaUnindexed : std::uint8_t(lambda_index);
  const EncodeResult<float> enc = codec.encode(image, tag);
  const long ms = elapsed_ms(t0);
  write_file(output, enc.container);

  const auto bytes = std::filesystem::file_size(output);
  const double px = double(image.h()) * double(image.w());
  std::cout << std::fixed << std::setprecision(4)
            << "bpp: " << 8.0 * double(bytes) / px << "\n"
            << "estimated_bpp: " << enc.estimated_bpp << "\n";
  std::cout << "encode_ms: " << ms << "\n";
  return 0;
}

int cmd_decode(const std::string& model_path, const std::string& input,
               const std::string& output, const std::string& reference) {
  Model<float> model = load_checkpoint<float>(model_path);
  const std::vector<std::uint8_t> buf = read_file(input);
  const auto t0 = Clock::now();
  Codec<float> codec(model);
  const DecodeResult<float> dec = codec.decode(buf);  // throws before any write
  const long ms = elapsed_ms(t0);
  write_ppm(output, dec.image);
  std::cout << "decode_ms: " << ms << "\n";
  if (!reference.empty()) {
    const Tensor<float> ref = read_ppm<float>(reference);
    std::cout << std::fixed << std::setprecision(4)
              << "psnr_db: " << psnr_db(mse_255(ref, dec.image)) << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& dir,
             const std::string& csv_path) {
  Model<float> model = load_checkpoint<float>(model_path);
  std::ofstream csv(csv_path, std::ios::trunc);
  require(bool(csv), "eval: cannot open csv '" + csv_path + "'");
  const auto rows = eval_folder(model, dir, &csv, &std::cerr);
  const EvalSummary s = summarize(rows);
  std::cout << "images: " << s.images << "\n"
            << std::fixed << std::setprecision(4)
            << "mean_bpp: " << s.mean_bpp << "\n"
            << "mean_psnr_db: " << s.mean_psnr << "\n"
            << "mean_msssim: " << s.mean_msssim << "\n"
            << "mean_msssim_db: " << s.mean_msssim_db << "\n"
            << "csv: " << csv_path << "\n";
  return 0;
}

int cmd_analyze(const std::string& preset, const std::string& model_path,
                const std::vector<std::string>& sets, const std::string& size,
                const std::string& csv_path) {
  const auto [h, w] = parse_size(size);
  std::optional<Model<float>> model;
  if (!model_path.empty()) {
    model.emplace(load_checkpoint<float>(model_path));
    require(sets.empty(), "analyze: overrides only apply with --config");
  } else {
    model.emplace(build_config(preset, sets), 0);
  }
  const ComplexityReport rep = count_model(*model, h, w);
  print_report(rep, std::cout, false);
  std::cout << "params_total: " << rep.total_params << "\n"
            << std::fixed << std::setprecision(2)
            << "kmacs_per_pixel: " << rep.kmacs_per_pixel << "\n";
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path, std::ios::trunc);
    require(bool(csv), "analyze: cannot open csv '" + csv_path + "'");
    print_report(rep, csv, true);
    std::cout << "csv: " << csv_path << "\n";
  }
  return 0;
}

int cmd_bdrate(const std::string& anchor_path, const std::string& test_path,
               double kmacs) {
  const RdCurve anchor = read_curve(anchor_path);
  const RdCurve test = read_curve(test_path);
  const double bd = bd_rate_percent(anchor, test);
  std::cout << std::fixed << std::setprecision(2) << "bd_rate: " << bd << "%\n";
  if (kmacs > 0)
    std::cout << std::scientific << std::setprecision(4)
              << "bd_rate_per_mac: " << bd_rate_per_mac(bd, kmacs) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"shiftlic: shift-based learned image compression"};
  app.require_subcommand(1);

  // train
  auto* tr = app.add_subcommand("train", "optimize a model on procedural patches");
  std::string tr_preset = "tiny";
  std::vector<std::string> tr_sets;
  TrainConfig tc;
  int tr_lambda_index = -1;
  std::string tr_metric = "mse";
  std::string tr_overfit;
  tc.csv_path = "train_log.csv";
  tc.checkpoint_path = "model.ckpt";
  tr->add_option("--config", tr_preset, "preset: medium, small, tiny, desk_medium");
  tr->add_option("--set", tr_sets, "config override key=value, repeatable");
  tr->add_option("--steps", tc.steps, "optimization steps");
  tr->add_option("--lambda", tc.lambda, "rate-distortion multiplier");
  tr->add_option("--lambda-index", tr_lambda_index,
                 "pick the multiplier from the seven-point ladder")
      ->check(CLI::Range(0, 6));
  tr->add_option("--metric", tr_metric, "mse or msssim");
  tr->add_option("--patch", tc.patch, "procedural patch side in pixels");
  tr->add_option("--seed", tc.seed, "rng seed (SHIFTLIC_SEED overrides)");
  tr->add_option("--overfit", tr_overfit,
                 "train on this one PPM image instead of random patches");
  tr->add_option("--csv", tc.csv_path, "per-step loss log");
  tr->add_option("--out", tc.checkpoint_path, "checkpoint output path");
  tr->add_option("--lr", tc.lr, "learning rate");
  tr->add_option("--lr-drop1", tc.lr_drop1_step, "step at which lr halves");
  tr->add_option("--lr-drop2", tc.lr_drop2_step, "step at which lr drops to a tenth");
  tr->add_option("--log-every", tc.log_every, "console log period");

  // encode
  auto* en = app.add_subcommand("encode", "compress a PPM image to a bitstream");
  std::string en_model, en_input, en_output;
  int en_lambda_index = -1;
  en->add_option("--model", en_model, "checkpoint path")->required();
  en->add_option("--input", en_input, "source .ppm")->required();
  en->add_option("--output", en_output, "destination .slic")->required();
  en->add_option("--lambda-index", en_lambda_index, "quality tag stored in the stream")
      ->check(CLI::Range(0, 6));

  // decode
  auto* de = app.add_subcommand("decode", "reconstruct a PPM from a bitstream");
  std::string de_model, de_input, de_output, de_reference;
  de->add_option("--model", de_model, "checkpoint path")->required();
  de->add_option("--input", de_input, "source .slic")->required();
  de->add_option("--output", de_output, "destination .ppm")->required();
  de->add_option("--reference", de_reference, "original image, prints psnr_db");

  // eval
  auto* ev = app.add_subcommand("eval", "compress every PPM in a folder");
  std::string ev_model, ev_dir, ev_csv = "eval.csv";
  ev->add_option("--model", ev_model, "checkpoint path")->required();
  ev->add_option("--dir", ev_dir, "folder of .ppm images")->required();
  ev->add_option("--csv", ev_csv, "per-image results table");

  // analyze
  auto* an = app.add_subcommand("analyze", "parameter and multiply budget");
  std::string an_preset = "medium", an_model, an_size = "768x512", an_csv;
  std::vector<std::string> an_sets;
  an->add_option("--config", an_preset, "preset: medium, small, tiny, desk_medium");
  an->add_option("--model", an_model, "checkpoint path instead of a preset");
  an->add_option("--set", an_sets, "config override key=value, repeatable");
  an->add_option("--size", an_size, "report resolution as WIDTHxHEIGHT");
  an->add_option("--csv", an_csv, "write the table as CSV too");

  // bdrate
  auto* bd = app.add_subcommand("bdrate", "average rate difference of two sweeps");
  std::string bd_anchor, bd_test;
  double bd_kmacs = 0;
  bd->add_option("--anchor", bd_anchor, "reference curve csv (bpp,quality_db)")
      ->required();
  bd->add_option("--test", bd_test, "candidate curve csv")->required();
  bd->add_option("--kmacs", bd_kmacs,
                 "decoder kilo-multiplies per pixel, adds the normalized figure");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (tr->parsed())
      return cmd_train(tr_preset, tr_sets, tc, tr_lambda_index, tr_metric,
                       tr_overfit);
    if (en->parsed()) return cmd_encode(en_model, en_input, en_output, en_lambda_index);
    if (de->parsed()) return cmd_decode(de_model, de_input, de_output, de_reference);
    if (ev->parsed()) return cmd_eval(ev_model, ev_dir, ev_csv);
    if (an->parsed()) return cmd_analyze(an_preset, an_model, an_sets, an_size, an_csv);
    if (bd->parsed()) return cmd_bdrate(bd_anchor, bd_test, bd_kmacs);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
