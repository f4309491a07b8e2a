#include "recritic/selector.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "recritic/corpus.hpp"

namespace recritic {

namespace {
constexpr std::string_view kCacheFormat = "recritic-embeddings";
}  // namespace

std::vector<std::string> random_select(const std::vector<std::string>& ids,
                                       std::size_t n, std::uint64_t seed) {
  if (n > ids.size()) {
    throw UsageError("random_select: n=" + std::to_string(n) + " exceeds pool of " +
                     std::to_string(ids.size()));
  }
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  DetRng rng(seed);
  // Partial Fisher-Yates: the first n slots are a uniform n-subset.
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_index(ids.size() - i));
    std::swap(order[i], order[j]);
  }
  order.resize(n);
  std::sort(order.begin(), order.end());
  std::vector<std::string> out;
  out.reserve(n);
  for (auto i : order) out.push_back(ids[i]);
  return out;
}

DifficultyTable load_correctness(const std::string& path) {
  DifficultyTable table;
  for (const auto& row : read_jsonl(path)) {
    const auto where = path + ":" + std::to_string(row.line);
    const auto id = row.value.find("id");
    const auto correct = row.value.find("correct");
    if (id == row.value.end() || !id->is_string()) {
      throw UsageError(where + ": \"id\" must be a string");
    }
    if (correct == row.value.end() || !correct->is_boolean()) {
      throw UsageError(where + ": \"correct\" must be true or false");
    }
    if (!table.correct.emplace(id->get<std::string>(), correct->get<bool>()).second) {
      throw UsageError(where + ": duplicate id \"" + id->get<std::string>() + "\"");
    }
  }
  return table;
}

void write_embedding_cache(const EmbeddingMatrix<double>& emb, const std::string& path) {
  emb.validate();
  OrderedJson header = OrderedJson::object();
  header["format"] = kCacheFormat;
  header["version"] = 1;
  header["dimension"] = emb.dim();
  header["count"] = emb.rows();
  header["ids"] = emb.ids;

  std::string payload = dump_line(header);
  payload += '\n';
  const std::size_t offset = payload.size();
  payload.resize(offset + static_cast<std::size_t>(emb.rows() * emb.dim()) * 4);
  char* out = payload.data() + offset;
  for (Eigen::Index i = 0; i < emb.rows(); ++i) {
    for (Eigen::Index c = 0; c < emb.dim(); ++c) {
      auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(emb.vectors(i, c)));
      for (int b = 0; b < 4; ++b) {
        *out++ = static_cast<char>((bits >> (8 * b)) & 0xffu);
      }
    }
  }
  write_text_file(path, payload);
}

EmbeddingMatrix<double> read_embedding_cache(const std::string& path) {
  const std::string bytes = read_text_file(path);
  const auto eol = bytes.find('\n');
  if (eol == std::string::npos) throw UsageError(path + ": missing cache header");
  Json header;
  try {
    header = Json::parse(bytes.substr(0, eol));
  } catch (const Json::parse_error& e) {
    throw UsageError(path + ": malformed cache header: " + e.what());
  }
  if (header.value("format", "") != kCacheFormat || header.value("version", 0) != 1) {
    throw UsageError(path + ": not a version 1 embedding cache");
  }
  EmbeddingMatrix<double> emb;
  Eigen::Index dim = 0;
  Eigen::Index count = 0;
  try {
    dim = header.at("dimension").get<Eigen::Index>();
    count = header.at("count").get<Eigen::Index>();
    emb.ids = header.at("ids").get<std::vector<std::string>>();
  } catch (const Json::exception& e) {
    throw UsageError(path + ": malformed cache header: " + e.what());
  }
  const std::size_t expected = static_cast<std::size_t>(dim * count) * 4;
  if (bytes.size() - eol - 1 != expected) {
    throw UsageError(path + ": payload size does not match header");
  }
  emb.vectors.resize(count, dim);
  const auto* in = reinterpret_cast<const unsigned char*>(bytes.data() + eol + 1);
  for (Eigen::Index i = 0; i < count; ++i) {
    for (Eigen::Index c = 0; c < dim; ++c) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(*in++) << (8 * b);
      emb.vectors(i, c) = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  emb.validate();
  return emb;
}

}  // namespace recritic
