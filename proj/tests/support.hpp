#ifndef RECRITIC_TESTS_SUPPORT_HPP
#define RECRITIC_TESTS_SUPPORT_HPP

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "recritic/common.hpp"
#include "recritic/corpus.hpp"

namespace testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(RECRITIC_FIXTURE_DIR) / name;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("recritic-" + tag + "-" + std::to_string(::getpid()) + "-" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string operator/(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

/// Strings mixing quotes, backslashes, control characters, newlines and
/// multi-byte UTF-8.
inline std::string adversarial_string(recritic::DetRng& rng, std::size_t max_len = 24) {
  static const std::vector<std::string> pieces = {
      "a", "Z", "0", " ", "\"", "\\", "\n", "\r\n", "\t", "{", "}", "{question}",
      "é", "ß", "日本", "🙂", "\x01", "\x7f", "/", "Hint:", ",", ":"};
  std::string s;
  const auto len = rng.uniform_index(max_len + 1);
  for (std::uint64_t i = 0; i < len; ++i) s += pieces[rng.uniform_index(pieces.size())];
  return s;
}

inline std::string non_blank_string(recritic::DetRng& rng) {
  return "x" + adversarial_string(rng) + "y";
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> out;
  std::string text = recritic::read_text_file(path);
  std::size_t start = 0;
  while (start < text.size()) {
    const auto end = text.find('\n', start);
    out.push_back(text.substr(start, end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

inline std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) {
    if (c == '\'') {
      q += "'\\''";
    } else {
      q += c;
    }
  }
  return q + "'";
}

/// Runs the recritic binary with args, capturing stdout and stderr.
inline CliResult run_cli(const std::vector<std::string>& args) {
  TempDir io("cli-io");
  std::string cmd = shell_quote(RECRITIC_CLI);
  for (const auto& a : args) cmd += " " + shell_quote(a);
  cmd += " >" + shell_quote(io / "out") + " 2>" + shell_quote(io / "err");
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = recritic::read_text_file(io / "out");
  r.err = recritic::read_text_file(io / "err");
  return r;
}

/// Relative path -> file bytes for every regular file under root.
inline std::map<std::string, std::string> snapshot_tree(const std::filesystem::path& root) {
  std::map<std::string, std::string> out;
  if (!std::filesystem::exists(root)) return out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) {
      out[std::filesystem::relative(e.path(), root).string()] =
          recritic::read_text_file(e.path().string());
    }
  }
  return out;
}

}  // namespace testing

#endif  // RECRITIC_TESTS_SUPPORT_HPP
