#include "capsar/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "capsar/error.hpp"

namespace capsar {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename U>
U parse_unsigned(std::string_view key, std::string_view value) {
  U out{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                      std::string(value) + "'");
  }
  return out;
}

double parse_double(std::string_view key, std::string_view value) {
  // from_chars for double is unavailable in libstdc++ 11; istringstream is
  // strict enough once trailing garbage is rejected.
  std::istringstream in{std::string(value)};
  double out = 0.0;
  in >> out;
  if (!in || in.peek() != std::char_traits<char>::eof()) {
    throw ConfigError("config key '" + std::string(key) + "': expected a number, got '" + std::string(value) + "'");
  }
  return out;
}

struct Field {
  std::function<void(RunConfig&, std::string_view key, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename U>
Field size_field(U RunConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.*member = parse_unsigned<U>(k, v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field model_size(std::size_t ModelConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) {
            c.model.*member = parse_unsigned<std::size_t>(k, v);
          },
          [member](const RunConfig& c) { return std::to_string(c.model.*member); }};
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

Field model_real(double ModelConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.model.*member = parse_double(k, v); },
          [member](const RunConfig& c) { return format_double(c.model.*member); }};
}

Field real_field(double RunConfig::*member) {
  return {[member](RunConfig& c, std::string_view k, std::string_view v) { c.*member = parse_double(k, v); },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

Field text_field(std::string RunConfig::*member) {
  return {[member](RunConfig& c, std::string_view, std::string_view v) { c.*member = std::string(v); },
          [member](const RunConfig& c) { return c.*member; }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"train", text_field(&RunConfig::train_path)},
      {"dev", text_field(&RunConfig::dev_path)},
      {"test", text_field(&RunConfig::test_path)},
      {"format",
       {[](RunConfig& c, std::string_view k, std::string_view v) {
          if (v != "auto" && v != "xml" && v != "tsv") {
            throw ConfigError("config key '" + std::string(k) + "': expected auto, xml or tsv, got '" +
                              std::string(v) + "'");
          }
          c.format = std::string(v);
        },
        [](const RunConfig& c) { return c.format; }}},
      {"embeddings", text_field(&RunConfig::embeddings_path)},
      {"output_dir", text_field(&RunConfig::output_dir)},
      {"seed", size_field(&RunConfig::seed)},
      {"epochs", size_field(&RunConfig::epochs)},
      {"batch_size", size_field(&RunConfig::batch_size)},
      {"learning_rate", real_field(&RunConfig::learning_rate)},
      {"threads", size_field(&RunConfig::threads)},
      {"threshold", real_field(&RunConfig::threshold)},
      {"top_k", size_field(&RunConfig::top_k)},
      {"embedding_dim", model_size(&ModelConfig::embedding_dim)},
      {"t_max", model_size(&ModelConfig::t_max)},
      {"gru_hidden", model_size(&ModelConfig::gru_hidden)},
      {"conv_kernel", model_size(&ModelConfig::conv_kernel)},
      {"conv_channels", model_size(&ModelConfig::conv_channels)},
      {"primary_count", model_size(&ModelConfig::primary_count)},
      {"primary_dim", model_size(&ModelConfig::primary_dim)},
      {"intermediate_count", model_size(&ModelConfig::intermediate_count)},
      {"intermediate_dim", model_size(&ModelConfig::intermediate_dim)},
      {"num_classes", model_size(&ModelConfig::num_classes)},
      {"sentiment_dim", model_size(&ModelConfig::sentiment_dim)},
      {"routing_iters", model_size(&ModelConfig::routing_iters)},
      {"alpha", model_real(&ModelConfig::alpha)},
      {"beta", model_real(&ModelConfig::beta)},
      {"gamma", model_real(&ModelConfig::gamma)},
      {"dropout", model_real(&ModelConfig::dropout)},
      {"m_plus", model_real(&ModelConfig::m_plus)},
      {"m_minus", model_real(&ModelConfig::m_minus)},
      {"lambda", model_real(&ModelConfig::lambda)},
  };
  return table;
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.first);
    return out;
  }();
  return names;
}

RunConfig parse_run_config(std::istream& in, const std::string& base_dir) {
  RunConfig config;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + body + "'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": missing key");
    config.set(key, value);
  }
  if (!base_dir.empty()) {
    namespace fs = std::filesystem;
    for (std::string* p : {&config.train_path, &config.dev_path, &config.test_path, &config.embeddings_path}) {
      if (!p->empty() && fs::path(*p).is_relative()) *p = (fs::path(base_dir) / *p).lexically_normal().string();
    }
  }
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_run_config(in, std::filesystem::path(path).parent_path().string());
}

void write_run_config(const RunConfig& config, std::ostream& out) {
  for (const auto& [name, field] : fields()) out << name << " = " << field.get(config) << '\n';
}

}  // namespace capsar
