#include "llamp/data_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "llamp/rng.hpp"
#include "llamp/serialize.hpp"

namespace llamp {

namespace {

// Attribute vocabulary: adjective + noun pairs the bundled lexicon tags as
// one chunk each.
const char* kAttributePool[] = {
    "striped panels", "round dome",    "glossy fins",   "woven mesh",
    "ridged shell",   "beaded rim",    "forked mast",   "coiled tube",
    "dotted hull",    "slanted vents", "braided cords", "hollow spokes",
    "fluted lattice", "banded prongs", "pleated grooves", "angular studs",
};
constexpr int kAttributePoolSize =
    static_cast<int>(sizeof(kAttributePool) / sizeof(kAttributePool[0]));

std::string opaque_class_name(int index, Rng& rng) {
  // Letter-number codes that carry no lexical content ("K-7" style).
  std::string name;
  name.push_back(static_cast<char>('A' + index % 26));
  if (index >= 26) name.push_back(static_cast<char>('A' + (index / 26) % 26));
  name += "-";
  name += std::to_string(rng.uniform_int(1, 99));
  return name;
}

constexpr char kImageMagic[4] = {'L', 'I', 'M', 'G'};
constexpr uint16_t kImageVersion = 1;

}  // namespace

std::vector<int> Dataset::indices_of_class(int label) const {
  std::vector<int> out;
  for (size_t i = 0; i < items.size(); ++i)
    if (items[i].label_id == label) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<ResponseRecord> generate_stub_responses(
    const std::vector<std::string>& class_names,
    const std::vector<std::vector<int>>& class_attributes,
    const std::vector<std::string>& attribute_names,
    const TemplateSet& templates, const NounPhraseExtractor& extractor) {
  std::vector<ResponseRecord> records;
  for (size_t c = 0; c < class_names.size(); ++c) {
    std::string listing;
    const auto& attrs = class_attributes[c];
    for (size_t a = 0; a < attrs.size(); ++a) {
      if (a > 0) listing += (a + 1 == attrs.size()) ? " and " : ", ";
      listing += attribute_names[attrs[a]];
    }
    for (size_t t = 0; t < templates.llm_templates.size(); ++t) {
      ResponseRecord r;
      r.class_name = class_names[c];
      r.template_id = static_cast<int>(t);
      // Alternate sentence frames; the leading filler exercises the
      // extractor's interjection handling.
      r.response_text =
          t % 2 == 0
              ? "Sure. The " + class_names[c] + " shows " + listing + "."
              : "Well, the " + class_names[c] + " is an object with " +
                    listing + ".";
      r.parsed_noun_phrases = extractor.extract(r.response_text);
      records.push_back(std::move(r));
    }
  }
  return records;
}

World generate_world(const SyntheticWorldConfig& cfg,
                     const TemplateSet& templates) {
  if (cfg.n_classes < 1 || cfg.n_attributes < 1 || cfg.patches < 1 ||
      cfg.patch_width < 1 || cfg.samples_per_class < 1 ||
      cfg.eval_per_class < 0 || cfg.noise_sigma < 0)
    throw std::invalid_argument("generate_world: invalid configuration");
  if (cfg.attributes_per_class < 1 ||
      cfg.attributes_per_class > cfg.n_attributes)
    throw std::invalid_argument(
        "generate_world: attributes_per_class must lie in [1, n_attributes]");
  if (cfg.n_attributes > kAttributePoolSize)
    throw std::invalid_argument("generate_world: at most " +
                                std::to_string(kAttributePoolSize) +
                                " attributes are available");
  if (cfg.attributes_per_class > cfg.patches)
    throw std::invalid_argument(
        "generate_world: attributes_per_class cannot exceed patches");

  Rng rng(cfg.seed);
  World w;
  w.config = cfg;

  for (int a = 0; a < cfg.n_attributes; ++a)
    w.attribute_names.emplace_back(kAttributePool[a]);
  w.attribute_prototypes =
      rng.normal_matrix(cfg.n_attributes, cfg.patch_width, 1.0);

  // Distinct attribute subsets per class.
  std::set<std::vector<int>> used;
  for (int c = 0; c < cfg.n_classes; ++c) {
    std::vector<int> subset;
    int guard = 0;
    do {
      std::vector<int> pool(cfg.n_attributes);
      for (int i = 0; i < cfg.n_attributes; ++i) pool[i] = i;
      for (int i = 0; i < cfg.attributes_per_class; ++i) {
        const int j =
            static_cast<int>(rng.uniform_int(i, cfg.n_attributes - 1));
        std::swap(pool[i], pool[j]);
      }
      subset.assign(pool.begin(), pool.begin() + cfg.attributes_per_class);
      std::sort(subset.begin(), subset.end());
      if (++guard > 10000)
        throw std::invalid_argument(
            "generate_world: not enough distinct attribute subsets for " +
            std::to_string(cfg.n_classes) + " classes");
    } while (used.count(subset));
    used.insert(subset);
    w.class_attributes.push_back(std::move(subset));
  }

  std::set<std::string> taken;
  for (int c = 0; c < cfg.n_classes; ++c) {
    std::string name;
    do {
      name = opaque_class_name(c, rng);
    } while (!taken.insert(name).second);
    ClassSpec spec;
    spec.label_id = c;
    spec.name = name;
    w.classes.push_back(std::move(spec));
  }

  std::vector<std::string> names;
  for (const auto& c : w.classes) names.push_back(c.name);
  w.train.class_names = names;
  w.test.class_names = names;

  auto sample_image = [&](int label) {
    LabeledImage img;
    img.label_id = label;
    img.patches = Eigen::MatrixXd::Zero(cfg.patches, cfg.patch_width);
    // Place each attribute prototype on its own random patch.
    std::vector<int> slots(cfg.patches);
    for (int i = 0; i < cfg.patches; ++i) slots[i] = i;
    const auto& attrs = w.class_attributes[label];
    for (size_t a = 0; a < attrs.size(); ++a) {
      const int j = static_cast<int>(
          rng.uniform_int(static_cast<int64_t>(a), cfg.patches - 1));
      std::swap(slots[a], slots[j]);
      img.patches.row(slots[a]) += w.attribute_prototypes.row(attrs[a]);
    }
    if (cfg.noise_sigma > 0)
      img.patches +=
          rng.normal_matrix(cfg.patches, cfg.patch_width, cfg.noise_sigma);
    return img;
  };

  for (int c = 0; c < cfg.n_classes; ++c)
    for (int s = 0; s < cfg.samples_per_class; ++s)
      w.train.items.push_back(sample_image(c));
  for (int c = 0; c < cfg.n_classes; ++c)
    for (int s = 0; s < cfg.eval_per_class; ++s)
      w.test.items.push_back(sample_image(c));

  RuleBasedExtractor extractor;
  w.responses = generate_stub_responses(names, w.class_attributes,
                                        w.attribute_names, templates, extractor);
  attach_responses(w.classes, w.responses);
  return w;
}

void save_image(const std::filesystem::path& path,
                const Eigen::MatrixXd& patches) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(kImageMagic, 4);
  write_u16(os, kImageVersion);
  write_u32(os, static_cast<uint32_t>(patches.rows()));
  write_u32(os, static_cast<uint32_t>(patches.cols()));
  write_matrix_rowmajor(os, patches);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Eigen::MatrixXd load_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for read: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kImageMagic, 4) != 0)
    throw std::runtime_error("malformed image file (bad magic): " +
                             path.string());
  const uint16_t version = read_u16(is);
  if (version != kImageVersion)
    throw std::runtime_error("unsupported image version in " + path.string());
  const uint32_t rows = read_u32(is);
  const uint32_t cols = read_u32(is);
  try {
    return read_matrix_rowmajor(is, rows, cols);
  } catch (const std::exception&) {
    throw std::runtime_error("malformed image file (truncated): " +
                             path.string());
  }
}

namespace {

void save_split(const Dataset& ds, const std::filesystem::path& dir) {
  std::map<int, int> counters;
  for (const auto& item : ds.items) {
    const std::filesystem::path cls_dir =
        dir / ds.class_names.at(item.label_id);
    std::filesystem::create_directories(cls_dir);
    char name[16];
    std::snprintf(name, sizeof(name), "%03d.img", counters[item.label_id]++);
    save_image(cls_dir / name, item.patches);
  }
}

}  // namespace

void save_world(const World& w, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  nlohmann::json manifest;
  manifest["config"] = {{"n_classes", w.config.n_classes},
                        {"n_attributes", w.config.n_attributes},
                        {"attributes_per_class", w.config.attributes_per_class},
                        {"patches", w.config.patches},
                        {"patch_width", w.config.patch_width},
                        {"noise_sigma", w.config.noise_sigma},
                        {"samples_per_class", w.config.samples_per_class},
                        {"eval_per_class", w.config.eval_per_class},
                        {"seed", w.config.seed}};
  manifest["attribute_names"] = w.attribute_names;
  nlohmann::json classes = nlohmann::json::array();
  for (size_t c = 0; c < w.classes.size(); ++c)
    classes.push_back({{"label_id", w.classes[c].label_id},
                       {"name", w.classes[c].name},
                       {"attributes", w.class_attributes[c]}});
  manifest["classes"] = classes;
  save_json_file(root / "manifest.json", manifest);
  save_response_store(root / "responses.jsonl", w.responses);
  save_split(w.train, root / "train");
  save_split(w.test, root / "test");
}

World load_world(const std::filesystem::path& root) {
  nlohmann::json manifest = load_json_file(root / "manifest.json");
  World w;
  const auto& c = manifest.at("config");
  w.config.n_classes = c.at("n_classes");
  w.config.n_attributes = c.at("n_attributes");
  w.config.attributes_per_class = c.at("attributes_per_class");
  w.config.patches = c.at("patches");
  w.config.patch_width = c.at("patch_width");
  w.config.noise_sigma = c.at("noise_sigma");
  w.config.samples_per_class = c.at("samples_per_class");
  w.config.eval_per_class = c.at("eval_per_class");
  w.config.seed = c.at("seed");
  w.attribute_names =
      manifest.at("attribute_names").get<std::vector<std::string>>();
  for (const auto& cls : manifest.at("classes")) {
    ClassSpec spec;
    spec.label_id = cls.at("label_id");
    spec.name = cls.at("name");
    w.classes.push_back(std::move(spec));
    w.class_attributes.push_back(cls.at("attributes").get<std::vector<int>>());
  }
  std::sort(w.classes.begin(), w.classes.end(),
            [](const ClassSpec& a, const ClassSpec& b) {
              return a.label_id < b.label_id;
            });
  if (std::filesystem::exists(root / "responses.jsonl")) {
    w.responses = load_response_store(root / "responses.jsonl");
    attach_responses(w.classes, w.responses);
  }
  w.train = load_directory_dataset(root / "train");
  w.test = load_directory_dataset(root / "test");
  return w;
}

Dataset load_directory_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root))
    throw std::runtime_error("dataset root does not exist: " + root.string());
  std::vector<std::string> class_dirs;
  for (const auto& entry : std::filesystem::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path().filename());
  if (class_dirs.empty())
    throw std::runtime_error("dataset root has no class directories: " +
                             root.string());
  std::sort(class_dirs.begin(), class_dirs.end());

  Dataset ds;
  ds.class_names = class_dirs;
  for (size_t label = 0; label < class_dirs.size(); ++label) {
    std::vector<std::filesystem::path> files;
    for (const auto& entry :
         std::filesystem::directory_iterator(root / class_dirs[label]))
      if (entry.is_regular_file() && entry.path().extension() == ".img")
        files.push_back(entry.path());
    if (files.empty())
      throw std::runtime_error("class directory has no images: " +
                               (root / class_dirs[label]).string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      LabeledImage img;
      img.label_id = static_cast<int>(label);
      img.patches = load_image(f);
      ds.items.push_back(std::move(img));
    }
  }
  return ds;
}

}  // namespace llamp
