// End-to-end checks for the command-line tool. Each scenario drives the real
// binary (path in argv[1]) through std::system and inspects its exit code,
// console output, and the files it writes. One [PASS]/[FAIL] line per check.

#include <rct/eval.hpp>
#include <rct/features.hpp>
#include <rct/model.hpp>
#include <rct/synthdata.hpp>
#include <rct/train.hpp>

#include <json.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int checks_failed = 0;

void report(bool ok, const std::string& name) {
  std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", name.c_str());
  if (!ok) ++checks_failed;
}

struct CmdResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work;

CmdResult run(const std::string& cmd) {
  const fs::path out_file = work / "stdout.txt";
  const fs::path err_file = work / "stderr.txt";
  const std::string full = cmd + " > " + out_file.string() + " 2> " + err_file.string();
  const int rc = std::system(full.c_str());
  CmdResult r;
  r.code = (rc != -1 && WIFEXITED(rc)) ? WEXITSTATUS(rc) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

int count_lines(const fs::path& path) {
  const std::string text = slurp(path);
  int n = 0;
  for (char c : text) {
    if (c == '\n') ++n;
  }
  return n;
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  return fs::exists(a) && fs::exists(b) && slurp(a) == slurp(b);
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

const char* kTinyConfig =
    "batch_weak=2\n"
    "batch_strong=2\n"
    "batch_unlabeled=2\n"
    "epochs=2\n"
    "warmup_epochs=1\n"
    "ema_decay=0.9\n"
    "d_max=2\n"
    "strategy=rct\n"
    "seed=7\n"
    "channels=2,2,2\n"
    "gru_hidden=2\n"
    "gru_layers=1\n";

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <rct-binary>\n", argv[0]);
    return 2;
  }
  const std::string rct = fs::absolute(argv[1]).string();
  work = fs::temp_directory_path() / "rct_cli_test";
  fs::remove_all(work);
  fs::create_directories(work);
  const auto at = [&](const std::string& rel) { return (work / rel).string(); };

  // -------------------------------------------------------------- gen-data
  {
    const auto r = run(rct + " gen-data --out " + at("d1") +
                       " --clips 3 --val 2 --classes 3 --seed 5");
    const bool files = fs::exists(work / "d1/strong.jsonl") &&
                       fs::exists(work / "d1/weak.jsonl") &&
                       fs::exists(work / "d1/unlabeled.jsonl") &&
                       fs::exists(work / "d1/val.jsonl");
    report(r.code == 0 && files && count_lines(work / "d1/strong.jsonl") == 3 &&
               count_lines(work / "d1/weak.jsonl") == 3 &&
               count_lines(work / "d1/unlabeled.jsonl") == 3 &&
               count_lines(work / "d1/val.jsonl") == 2,
           "gen-data writes all four manifests with the requested clip counts");

    bool meta_ok = false;
    if (fs::exists(work / "d1/dataset.json") && fs::exists(work / "d1/run.json")) {
      const json meta = json::parse(slurp(work / "d1/dataset.json"));
      const json manifest = json::parse(slurp(work / "d1/run.json"));
      meta_ok = meta.at("classes") == 3 && meta.at("seed") == 5 &&
                manifest.at("command") == "gen-data" && manifest.contains("inputs_hash");
    }
    report(meta_ok, "gen-data records the class count and generation seed");
  }
  {
    const auto r = run(rct + " gen-data --out " + at("d0") + " --clips 0");
    report(r.code == 0 && count_lines(work / "d0/strong.jsonl") == 0 &&
               count_lines(work / "d0/unlabeled.jsonl") == 0,
           "gen-data --clips 0 writes empty manifests");
  }
  {
    run(rct + " gen-data --out " + at("d1b") + " --clips 3 --val 2 --classes 3 --seed 5");
    report(same_bytes(work / "d1/strong.jsonl", work / "d1b/strong.jsonl") &&
               same_bytes(work / "d1/val.jsonl", work / "d1b/val.jsonl") &&
               same_bytes(work / "d1/wav/strong_0000.wav", work / "d1b/wav/strong_0000.wav") &&
               same_bytes(work / "d1/wav/val_0001.wav", work / "d1b/wav/val_0001.wav"),
           "generation is reproducible: same seed, same bytes");
  }

  // -------------------------------------------------------------- features
  {
    const auto first = run(rct + " features --data " + at("d1"));
    const auto second = run(rct + " features --data " + at("d1"));
    report(first.code == 0 && contains(first.out, "extracted 11") && second.code == 0 &&
               contains(second.out, "extracted 0") && contains(second.out, "skipped 11"),
           "features extracts every clip once and then reuses the cache");
  }
  {
    run(rct + " gen-data --out " + at("d2") + " --clips 3 --val 2 --classes 3 --seed 5");
    write_text(work / "d2/wav/weak_0001.wav", "not a wav");
    const auto r = run(rct + " features --data " + at("d2"));
    report(r.code != 0 && contains(r.err, "weak_0001") &&
               fs::exists(work / "d2/cache/weak_0000.rctf") &&
               fs::exists(work / "d2/cache/val_0001.rctf") &&
               !fs::exists(work / "d2/cache/weak_0001.rctf"),
           "a corrupt WAV fails feature extraction without hurting other clips");
  }

  // -------------------------------------------------------------- train
  write_text(work / "cfg.txt", kTinyConfig);
  {
    const auto r = run(rct + " train --data " + at("d1") + " --config " + at("cfg.txt") +
                       " --out " + at("t1"));
    const auto rows = read_csv(work / "t1/metrics.csv");
    report(r.code == 0 && !rows.empty() &&
               rows[0] == std::vector<std::string>{"epoch", "step", "supervised", "meanteacher",
                                                   "self_consistency", "total", "val_bce", "lr",
                                                   "r"} &&
               fs::exists(work / "t1/checkpoint_best.bin") &&
               fs::exists(work / "t1/checkpoint_final.bin") && fs::exists(work / "t1/run.json"),
           "train smoke run writes metrics and both checkpoints");
    report(contains(r.out, "3 branches per step") && contains(r.out, "-> 18 forward passes"),
           "a three-branch strategy logs three forward passes per sample");
  }
  {
    const auto r = run(rct + " train --data " + at("d1") + " --config " + at("cfg.txt") +
                       " --strategy baseline --out " + at("t_base"));
    const auto rows = read_csv(work / "t_base/metrics.csv");
    bool sc_zero = rows.size() > 1;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      sc_zero = sc_zero && rows[i].size() >= 5 && std::stod(rows[i][4]) == 0.0;
    }
    report(r.code == 0 && contains(r.out, "1 branch per step") && sc_zero,
           "baseline strategy logs a single branch and no self-consistency");
  }
  {
    run(rct + " train --data " + at("d1") + " --config " + at("cfg.txt") + " --out " +
        at("t1b"));
    report(same_bytes(work / "t1/metrics.csv", work / "t1b/metrics.csv") &&
               same_bytes(work / "t1/checkpoint_final.bin", work / "t1b/checkpoint_final.bin"),
           "training is deterministic: re-running reproduces metrics.csv and the checkpoint");
  }
  {
    const auto r = run(rct + " train --data " + at("d1") + " --strategy bogus --out " +
                       at("t_bad"));
    report(r.code == 2 && contains(r.err, "unknown strategy") && contains(r.err, "rct"),
           "unknown strategy names exit with a usage error");
  }

  // -------------------------------------------------------------- eval
  {
    const auto r = run(rct + " eval --checkpoint " + at("t1/checkpoint_best.bin") + " --data " +
                       at("d1") + " --out " + at("e1"));
    bool ok = r.code == 0 && fs::exists(work / "e1/scores.csv");
    if (ok) {
      const json s = json::parse(slurp(work / "e1/scores.json"));
      for (const char* key : {"psds1", "psds2", "macro_f1"}) {
        const double v = s.at(key).get<double>();
        ok = ok && v >= 0.0 && v <= 1.0;
      }
    }
    report(ok, "eval writes scores in range");
  }
  {
    const auto r = run(rct + " eval --checkpoint " + at("t1/checkpoint_best.bin") + " --data " +
                       at("d1") + " --temperature 1.0 --out " + at("e_t1"));

    // the same chain through the library, with no temperature step at all
    rct::train::TrainConfig cfg = rct::train::load_train_config(work / "cfg.txt");
    const auto net = rct::train::model_config_for(cfg, 3);
    const auto ckpt = rct::model::load_checkpoint<float>(work / "t1/checkpoint_best.bin");
    const auto gt = rct::synth::read_manifest(work / "d1/val.jsonl");
    std::vector<std::pair<std::string, rct::Mat>> probs;
    for (const auto& ann : gt) {
      const auto clip =
          rct::features::read_melclip(work / "d1/cache" / (ann.clip_id + ".rctf"));
      const rct::MatT<float> mel = clip.values.cast<float>();
      const auto preds = rct::model::forward<float>(net, ckpt.student, mel, nullptr);
      probs.emplace_back(ann.clip_id, preds.strong.cast<double>());
    }
    const auto lengths = rct::eval::median_lengths_from_gt(gt, 3);
    const double want_psds1 =
        rct::eval::psds_score(probs, gt, 3, lengths, rct::eval::psds_scenario1());
    const auto detections = rct::eval::decode_dataset(probs, 0.5,
                                                      rct::synth::kOutFrameSeconds, lengths);
    const double want_f1 = rct::eval::event_f1(detections, gt, 3).macro;

    bool ok = r.code == 0;
    if (ok) {
      const json s = json::parse(slurp(work / "e_t1/scores.json"));
      ok = s.at("psds1").get<double>() == want_psds1 &&
           s.at("macro_f1").get<double>() == want_f1;
    }
    report(ok, "temperature 1 scoring matches the library forward pass");
  }
  {
    const auto r = run(rct + " eval --checkpoint " + at("t1/checkpoint_best.bin") +
                       " --checkpoint " + at("t1/checkpoint_best.bin") + " --data " + at("d1") +
                       " --out " + at("e_dup"));
    report(r.code == 0 && same_bytes(work / "e1/scores.json", work / "e_dup/scores.json") &&
               same_bytes(work / "e1/scores.csv", work / "e_dup/scores.csv"),
           "averaging a checkpoint with itself changes nothing");
  }
  {
    write_text(work / "cfg4.txt", std::string(kTinyConfig) + "gru_hidden=4\n");
    run(rct + " train --data " + at("d1") + " --config " + at("cfg4.txt") + " --out " +
        at("t_h4"));
    const auto r = run(rct + " eval --checkpoint " + at("t_h4/checkpoint_best.bin") +
                       " --config " + at("cfg.txt") + " --classes 3 --data " + at("d1") +
                       " --out " + at("e_bad"));
    report(r.code != 0 && contains(r.err, "mismatch"),
           "a checkpoint evaluated against the wrong configuration is rejected");
  }

  // -------------------------------------------------------------- ablate
  {
    const auto r1 = run(rct + " ablate --data " + at("d1") + " --out " + at("a1") +
                        " --seeds 1 --config " + at("cfg.txt"));
    const auto r2 = run("RCT_THREADS=2 " + rct + " ablate --data " + at("d1") + " --out " +
                        at("a2") + " --seeds 1 --config " + at("cfg.txt"));
    const auto rows = read_csv(work / "a1/table.csv");
    bool ok = r1.code == 0 && r2.code == 0 && rows.size() == 9 && rows[0].size() == 9 &&
              rows[0][0] == "strategy" && rows[0][1] == "psds1_mean";
    const std::vector<std::string> expect = {"baseline", "vanilla-mixup", "hard-mixup",
                                             "randwarp", "rct",          "ict",
                                             "sct",      "ict-sct"};
    for (std::size_t i = 0; ok && i < expect.size(); ++i) {
      ok = rows[i + 1].size() == 9 && rows[i + 1][0] == expect[i];
    }
    ok = ok && same_bytes(work / "a1/table.csv", work / "a2/table.csv") &&
         fs::exists(work / "a1/rct/seed1/metrics.csv") &&
         fs::exists(work / "a1/baseline/seed1/scores.json");
    report(ok, "ablate covers every strategy and reproduces its table byte for byte");
  }

  // -------------------------------------------------------------- sweep-dmax
  {
    const auto r1 = run(rct + " sweep-dmax --data " + at("d1") + " --out " + at("s1") +
                        " --seeds 1 --values 1..2 --config " + at("cfg.txt"));
    const auto r2 = run(rct + " sweep-dmax --data " + at("d1") + " --out " + at("s2") +
                        " --seeds 1 --values 1..2 --config " + at("cfg.txt"));
    const auto rows = read_csv(work / "s1/sweep.csv");
    bool ok = r1.code == 0 && r2.code == 0 && rows.size() == 4 &&
              rows[0] == std::vector<std::string>{"d_max", "psds1_mean", "psds1_std",
                                                  "gain_mean", "gain_std"} &&
              rows[1][0] == "0" && rows[2][0] == "1" && rows[3][0] == "2";
    ok = ok && std::stod(rows[1][3]) == 0.0 && std::stod(rows[1][4]) == 0.0;
    ok = ok && same_bytes(work / "s1/sweep.csv", work / "s2/sweep.csv");
    report(ok, "sweep-dmax reports a zero-gain baseline row and is reproducible");
  }

  std::printf("%s: %d check(s) failed\n", checks_failed == 0 ? "OK" : "FAILED", checks_failed);
  return checks_failed == 0 ? 0 : 1;
}
