#pragma once

// On-disk run directory: manifest.json plus hashed artifacts.
//
//   manifest.json
//   dataset.csv, dataset.json, split.json
//   models/{reference,logistic}.{json,bin}
//   rashomon/{masks.csv, losses.csv, attributions.csv, sample.json}
//   dman/{dman.json, dman.bin}
//   targets/{tid}/{target.json, result.json, trace.csv}
//   reports/
//
// Every artifact is written to a temporary file and renamed into place; its
// SHA-256 is recorded in the manifest and checked when read back.

#include "exagree/core.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

namespace exagree {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    fail("SHA-256 computation failed", ErrorKind::internal);
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

inline std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot read " + path.string(), ErrorKind::not_found);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes `bytes` next to `path` and renames it into place.
inline void atomic_write(const fs::path& path, std::string_view bytes) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write " + tmp.string(), ErrorKind::internal);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) fail("short write to " + tmp.string(), ErrorKind::internal);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    fail("cannot rename into " + path.string() + ": " + ec.message(), ErrorKind::internal);
  }
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline constexpr std::array<const char*, 7> kStages = {"data", "reference", "rashomon", "dman", "targets", "saem", "reports"};

inline int stage_index(const std::string& stage) {
  for (std::size_t i = 0; i < kStages.size(); ++i)
    if (stage == kStages[i]) return static_cast<int>(i);
  fail("unknown stage '" + stage + "'", ErrorKind::internal);
}

/// Exclusive lock file; creation fails if it already exists.
class LockFile {
 public:
  LockFile() = default;
  explicit LockFile(fs::path path, const std::string& what) : path_(std::move(path)) {
    fs::create_directories(path_.parent_path());
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      path_.clear();
      fail(what + " is already running (lock held)", ErrorKind::conflict);
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;
  LockFile(LockFile&& o) noexcept : path_(std::exchange(o.path_, {})) {}
  LockFile& operator=(LockFile&& o) noexcept {
    if (this != &o) {
      release();
      path_ = std::exchange(o.path_, {});
    }
    return *this;
  }
  ~LockFile() { release(); }

  void release() {
    if (!path_.empty()) {
      std::error_code ec;
      fs::remove(path_, ec);
      path_.clear();
    }
  }
  bool held() const { return !path_.empty(); }

 private:
  fs::path path_;
};

class RunDir {
 public:
  /// Starts a fresh run. Refuses to overwrite an existing manifest.
  static RunDir create(const fs::path& root, std::uint64_t seed) {
    require(!fs::exists(root / "manifest.json"), "run directory " + root.string() + " already holds a run");
    fs::create_directories(root);
    RunDir r;
    r.root_ = root;
    const std::string ts = utc_timestamp();
    r.manifest_ = {{"format_version", 1},
                   {"run_id", root.filename().string()},
                   {"created_at", ts},
                   {"updated_at", ts},
                   {"seeds", {{"global", seed}}},
                   {"config", nlohmann::json::object()},
                   {"stages", nlohmann::json::object()},
                   {"artifacts", nlohmann::json::object()},
                   {"targets", nlohmann::json::object()}};
    for (const char* s : kStages) r.manifest_["stages"][s] = {{"done", false}};
    r.save();
    return r;
  }

  /// Loads a run and verifies every recorded artifact hash.
  static RunDir open(const fs::path& root, bool verify = true) {
    const fs::path mp = root / "manifest.json";
    if (!fs::exists(mp)) fail("no run at " + root.string() + " (manifest.json missing)", ErrorKind::not_found);
    RunDir r;
    r.root_ = root;
    ManifestLock lock(root, true);
    try {
      r.manifest_ = nlohmann::json::parse(read_bytes(mp));
    } catch (const nlohmann::json::exception& e) {
      fail("manifest.json is not valid JSON: " + std::string(e.what()));
    }
    require(r.manifest_.value("format_version", 0) == 1, "unsupported manifest format");
    if (verify)
      for (const auto& [rel, digest] : r.manifest_.at("artifacts").items()) r.verify(rel, digest.get<std::string>());
    return r;
  }

  const fs::path& root() const { return root_; }
  std::string id() const { return manifest_.at("run_id").get<std::string>(); }
  nlohmann::json& manifest() { return manifest_; }
  const nlohmann::json& manifest() const { return manifest_; }
  std::uint64_t seed() const { return manifest_.at("seeds").at("global").get<std::uint64_t>(); }

  /// Seed for a named stage, derived once and then recorded so replays reuse it.
  std::uint64_t stage_seed(const std::string& name, std::uint64_t salt) {
    auto& seeds = manifest_["seeds"];
    if (!seeds.contains(name)) seeds[name] = mix_seed(seed(), salt);
    return seeds[name].get<std::uint64_t>();
  }

  void set_seed(const std::string& name, std::uint64_t value) { manifest_["seeds"][name] = value; }

  void write(const std::string& rel, std::string_view bytes) {
    atomic_write(root_ / rel, bytes);
    manifest_["artifacts"][rel] = sha256_hex(bytes);
  }

  void write_json(const std::string& rel, const nlohmann::json& j) { write(rel, j.dump(2) + "\n"); }

  bool has(const std::string& rel) const { return manifest_.at("artifacts").contains(rel); }

  std::string read(const std::string& rel) const {
    if (!has(rel)) fail("artifact " + rel + " is not recorded in the manifest", ErrorKind::not_found);
    const std::string bytes = read_bytes(root_ / rel);
    const auto expected = manifest_["artifacts"][rel].get<std::string>();
    if (sha256_hex(bytes) != expected) fail("hash mismatch for " + rel + ": file was modified after it was recorded");
    return bytes;
  }

  nlohmann::json read_json(const std::string& rel) const { return nlohmann::json::parse(read(rel)); }

  bool stage_done(const std::string& stage) const {
    const auto& s = manifest_.at("stages");
    return s.contains(stage) && s[stage].value("done", false);
  }

  /// Throws "<stage> stage missing" for the first incomplete prerequisite.
  void require_stages_before(const std::string& stage) const {
    const int idx = stage_index(stage);
    for (int i = 0; i < idx; ++i) {
      // targets/saem/reports are repeatable and do not gate one another beyond dman.
      if (i >= stage_index("targets") && stage != "saem") continue;
      if (!stage_done(kStages[static_cast<std::size_t>(i)])) fail(std::string(kStages[static_cast<std::size_t>(i)]) + " stage missing");
    }
  }

  /// Marks `stage` complete. Re-running an upstream stage invalidates
  /// everything downstream of it.
  void complete(const std::string& stage) {
    const int idx = stage_index(stage);
    const bool rerun = stage_done(stage);
    manifest_["stages"][stage] = {{"done", true}, {"at", utc_timestamp()}};
    if (rerun && idx < stage_index("targets"))
      for (std::size_t i = static_cast<std::size_t>(idx) + 1; i < kStages.size(); ++i) manifest_["stages"][kStages[i]] = {{"done", false}};
  }

  void save() {
    manifest_["updated_at"] = utc_timestamp();
    atomic_write(root_ / "manifest.json", manifest_.dump(2) + "\n");
  }

  void verify(const std::string& rel, const std::string& expected) const {
    const fs::path path = root_ / rel;
    if (!fs::exists(path)) fail("artifact " + rel + " is missing from " + root_.string(), ErrorKind::not_found);
    if (sha256_hex(read_bytes(path)) != expected)
      fail("hash mismatch for " + rel + ": refusing to load run " + root_.string());
  }

  /// Serializes read-modify-write cycles on the manifest across processes.
  class ManifestLock {
   public:
    explicit ManifestLock(const fs::path& root, bool shared = false) {
      fd_ = ::open((root / ".manifest.lock").c_str(), O_CREAT | O_RDWR, 0644);
      if (fd_ < 0) {
        // Readers of a read-only run proceed unlocked.
        if (shared) return;
        fail("cannot lock manifest in " + root.string(), ErrorKind::internal);
      }
      if (::flock(fd_, shared ? LOCK_SH : LOCK_EX) != 0) fail("cannot lock manifest in " + root.string(), ErrorKind::internal);
    }
    ManifestLock(const ManifestLock&) = delete;
    ManifestLock& operator=(const ManifestLock&) = delete;
    ~ManifestLock() {
      if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
      }
    }

   private:
    int fd_ = -1;
  };

  /// Re-reads the manifest under the lock, applies `fn`, and saves.
  template <class Fn>
  void update(Fn&& fn) {
    ManifestLock lock(root_);
    manifest_ = nlohmann::json::parse(read_bytes(root_ / "manifest.json"));
    fn(*this);
    save();
  }

 private:
  fs::path root_;
  nlohmann::json manifest_;
};

inline bool is_run_dir(const fs::path& p) { return fs::is_regular_file(p / "manifest.json"); }

}  // namespace exagree
