#include "fixtures.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <random>

#include "sparsepat/core/rng.hpp"
#include "sparsepat/featenc.hpp"
#include "sparsepat/interphead.hpp"
#include "sparsepat/pipeline.hpp"

namespace testsupport {

namespace fs = std::filesystem;
using namespace sparsepat;

TempDir::TempDir(const std::string& tag) {
  std::random_device rd;
  path_ = fs::temp_directory_path() /
          ("sparsepat-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(rd()));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

registry::PatternRecord make_pattern(std::size_t n) {
  registry::PatternRecord p;
  p.pattern_id = registry::make_pattern_id(n);
  p.members = {{n % 3, n}, {(n + 1) % 3, n + 7}};
  p.centroid.assign(4, 0.0);
  p.centroid[n % 4] = 1.0;
  p.gallery.neuron = p.members.front();
  for (std::size_t j = 0; j < 3; ++j) {
    p.gallery.exemplars.push_back({"r" + std::to_string(100 + j), 3.0 - 0.5 * j,
                                   "factor-" + std::to_string(n) + " present"});
  }
  p.holdout = {{"r200", 0.9, "factor-" + std::to_string(n)}, {"r201", 0.8, "other"}};
  p.gallery.frequency = 0.01 * static_cast<double>(n % 50);
  p.gallery.mean_activation = 2.0;
  p.gallery.max_activation = 3.0;
  p.consistency = 0.6;
  if (n % 2 == 0) {
    p.annotation = registry::Annotation{"pattern dominated by factor-" + std::to_string(n),
                                        static_cast<registry::Category>(n % 6), 1.0};
  }
  return p;
}

void seed_store(const fs::path& store, std::size_t n_patterns, bool with_head) {
  std::vector<registry::PatternRecord> ps;
  for (std::size_t n = 1; n <= n_patterns; ++n) ps.push_back(make_pattern(n));
  const pipeline::Store s{store};
  registry::Registry::create(s.registry(), ps);
  if (!with_head) return;

  const std::size_t cols = std::min<std::size_t>(n_patterns, 8);
  Rng rng(99);
  featenc::FeatureMatrix fm;
  for (std::size_t j = 0; j < cols; ++j) fm.pattern_ids.push_back(ps[j].pattern_id);
  for (std::size_t r = 0; r < 12; ++r) {
    featenc::SparseRow acts;
    for (std::uint32_t j = 0; j < cols; ++j) {
      if (rng.uniform() < 0.6) {
        acts.index.push_back(j);
        acts.value.push_back(rng.uniform(0.1, 2.0));
      }
    }
    char id[8];
    std::snprintf(id, sizeof id, "r%03zu", r);
    fm.rows.push_back(featenc::encode_row(id, acts, std::vector<double>(cols, 0.0), 30));
  }
  featenc::save_features(s.features(), fm);

  interphead::HeadModel head;
  head.pattern_ids = fm.pattern_ids;
  for (std::size_t j = 0; j < cols; ++j) {
    head.descriptions.push_back(ps[j].annotation ? ps[j].annotation->description : "");
  }
  for (const char* name : {"cardiomegaly", "edema"}) {
    interphead::TargetHead t;
    t.name = name;
    t.trained = true;
    t.converged = true;
    for (std::size_t j = 0; j < cols; ++j) {
      t.weights.push_back(j % 3 == 0 ? 0.0 : rng.uniform(-3.0, 3.0));
    }
    t.bias = rng.uniform(-1.0, 1.0);
    head.targets.push_back(t);
  }
  interphead::save_head(s.head(), head);
}

fs::path cli_path() { return SPARSEPAT_CLI; }

std::pair<int, std::string> run_capture(const std::string& command) {
  std::string out;
  FILE* pipe = ::popen(command.c_str(), "r");
  if (!pipe) return {-1, out};
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

}  // namespace testsupport
