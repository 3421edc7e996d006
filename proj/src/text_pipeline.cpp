#include "llamp/text_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "llamp/serialize.hpp"

namespace llamp {

namespace {

const char* kQueryTemplate0 =
    "In one sentence, describe the distinctive appearance of [STH]";

// Static paraphrase list standing in for machine-generated query templates.
const char* kQueryTemplates[] = {
    kQueryTemplate0,
    "Briefly describe what [STH] looks like",
    "Summarize the visual appearance of [STH] in one sentence",
    "What does [STH] look like",
    "Give a one-sentence visual description of [STH]",
    "Describe the most recognizable visual features of [STH]",
    "In a single sentence, explain how to recognize [STH] by sight",
    "List the visual traits that distinguish [STH], in one sentence",
};

const char* kClipTemplates[] = {
    "A photo of [STH]",
    "A photo of [STH] with [NP]",
};

size_t count_occurrences(const std::string& s, const std::string& needle) {
  size_t n = 0, pos = 0;
  while ((pos = s.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

std::string replace_all(std::string s, const std::string& from,
                        const std::string& to) {
  size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

enum class WordTag { stop, verb, adverb, adjective, noun, other, punct };

const std::unordered_set<std::string>& stopword_set() {
  static const std::unordered_set<std::string> s = {
      "a",    "an",    "the",  "and",   "or",    "but",   "with",  "of",
      "in",   "on",    "at",   "to",    "from",  "by",    "for",   "as",
      "it",   "its",   "this", "that",  "these", "those", "there", "here",
      "is",   "are",   "was",  "were",  "be",    "been",  "being", "has",
      "have", "had",   "do",   "does",  "did",   "will",  "would", "can",
      "could","should","may",  "might", "must",  "not",   "no",    "nor",
      "so",   "such",  "than", "then",  "too",   "very",  "quite", "also",
      "just", "about", "over", "under", "between", "among", "through",
      "sure", "yes",   "well", "okay",  "oh",    "hey",   "hmm",   "like",
      "into", "onto",  "each", "both",  "all",   "some",  "most",  "more",
      "other","when",  "while","which", "what",  "how",   "where", "who",
  };
  return s;
}

const std::unordered_set<std::string>& verb_set() {
  static const std::unordered_set<std::string> s = {
      "runs",     "run",      "running",  "ran",       "describe",
      "describes","described","show",     "shows",     "showed",
      "showing",  "feature",  "features", "featured",  "look",
      "looks",    "looked",   "appear",   "appears",   "appeared",
      "stand",    "stands",   "sit",      "sits",      "carry",
      "carries",  "display",  "displays", "include",   "includes",
      "consist",  "consists", "make",     "makes",     "made",
      "build",    "builds",   "built",    "know",      "known",
      "see",      "seen",     "recognize","recognizes","distinguish",
      "distinguishes", "explain", "explains", "summarize", "summarizes",
      "give",     "gives",    "list",     "lists",     "answer",
      "answers",  "comes",    "come",     "keeps",     "keep",
  };
  return s;
}

const std::unordered_set<std::string>& adjective_set() {
  static const std::unordered_set<std::string> s = {
      "striped",  "round",    "glossy",   "woven",    "ridged",
      "beaded",   "forked",   "coiled",   "dotted",   "slanted",
      "braided",  "hollow",   "fluted",   "banded",   "pleated",
      "angular",  "large",    "small",    "long",     "short",
      "wide",     "narrow",   "flat",     "curved",   "straight",
      "vertical", "horizontal", "rectangular", "circular", "square",
      "pale",     "dark",     "bright",   "dull",     "smooth",
      "rough",    "turboprop","distinctive", "recognizable", "visual",
      "one",      "two",      "three",    "four",     "five",
      "six",      "seven",    "eight",    "nine",     "ten",
      "single",
  };
  return s;
}

const std::unordered_set<std::string>& noun_set() {
  static const std::unordered_set<std::string> s = {
      "panels",   "panel",    "dome",     "domes",    "fins",
      "fin",      "mesh",     "meshes",   "shell",    "shells",
      "rim",      "rims",     "mast",     "masts",    "tube",
      "tubes",    "hull",     "hulls",    "vents",    "vent",
      "cords",    "cord",     "spokes",   "spoke",    "lattice",
      "lattices", "prongs",   "prong",    "grooves",  "groove",
      "studs",    "stud",     "engines",  "engine",   "aircraft",
      "wings",    "wing",     "fuselage", "tail",     "tails",
      "body",     "bodies",   "surface",  "surfaces", "cluster",
      "clusters", "structure","structures", "roof",   "roofs",
      "line",     "lines",    "building", "buildings", "texture",
      "textures", "pattern",  "patterns",
  };
  return s;
}

WordTag tag_word(const std::string& w) {
  if (w.size() == 1 && !std::isalnum(static_cast<unsigned char>(w[0])))
    return WordTag::punct;
  if (stopword_set().count(w)) return WordTag::stop;
  if (verb_set().count(w)) return WordTag::verb;
  if (adjective_set().count(w)) return WordTag::adjective;
  if (noun_set().count(w)) return WordTag::noun;
  if (w.size() > 3 && w.compare(w.size() - 2, 2, "ly") == 0)
    return WordTag::adverb;
  return WordTag::other;
}

}  // namespace

TemplateSet TemplateSet::builtin() {
  TemplateSet t;
  for (const char* s : kQueryTemplates) t.llm_templates.emplace_back(s);
  for (const char* s : kClipTemplates) t.clip_templates.emplace_back(s);
  t.validate();
  return t;
}

TemplateSet TemplateSet::from_json_file(const std::filesystem::path& path) {
  nlohmann::json j = load_json_file(path);
  TemplateSet t;
  t.llm_templates = j.at("llm").get<std::vector<std::string>>();
  t.clip_templates = j.at("clip").get<std::vector<std::string>>();
  t.validate();
  return t;
}

void TemplateSet::validate() const {
  if (llm_templates.empty() || llm_templates[0] != kQueryTemplate0)
    throw std::invalid_argument(
        "TemplateSet: query template 0 must be exactly \"" +
        std::string(kQueryTemplate0) + "\"");
  for (const auto& t : llm_templates)
    if (count_occurrences(t, "[STH]") != 1)
      throw std::invalid_argument("TemplateSet: query template \"" + t +
                                  "\" must contain [STH] exactly once");
  for (const auto& t : clip_templates) {
    if (count_occurrences(t, "[STH]") != 1)
      throw std::invalid_argument("TemplateSet: caption template \"" + t +
                                  "\" must contain [STH] exactly once");
    if (count_occurrences(t, "[NP]") > 1)
      throw std::invalid_argument("TemplateSet: caption template \"" + t +
                                  "\" may contain [NP] at most once");
  }
}

std::string render_template(const std::string& tmpl, const std::string& name,
                            const std::string& noun_phrase) {
  std::string out = replace_all(tmpl, "[STH]", name);
  out = replace_all(out, "[NP]", noun_phrase);
  return out;
}

std::string render_query(const std::string& name, int template_id,
                         const TemplateSet& templates) {
  if (template_id < 0 ||
      template_id >= static_cast<int>(templates.llm_templates.size()))
    throw std::out_of_range("render_query: unknown template id " +
                            std::to_string(template_id));
  return render_template(templates.llm_templates[template_id], name);
}

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    // Trim hyphens that are not interior (a lone "-" token becomes empty).
    while (!word.empty() && word.front() == '-') word.erase(word.begin());
    while (!word.empty() && word.back() == '-') word.pop_back();
    if (!word.empty()) out.push_back(word);
    word.clear();
  };
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '-') {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (!std::isspace(c)) out.push_back(std::string(1, ch));
    }
  }
  flush();
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus) {
  std::set<std::string> vocab;
  for (const auto& text : corpus)
    for (auto& w : split_words(text)) vocab.insert(w);
  Tokenizer t;
  t.id_to_token_ = {"[UNK]", "[BOS]", "[EOS]"};
  for (const auto& w : vocab) {
    t.token_to_id_[w] = static_cast<int>(t.id_to_token_.size());
    t.id_to_token_.push_back(w);
  }
  return t;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    auto it = token_to_id_.find(w);
    ids.push_back(it == token_to_id_.end() ? unk_id() : it->second);
  }
  return ids;
}

const std::string& Tokenizer::token_text(int id) const {
  if (id < 0 || id >= vocab_size())
    throw std::out_of_range("Tokenizer: id " + std::to_string(id) +
                            " outside vocabulary of size " +
                            std::to_string(vocab_size()));
  return id_to_token_[static_cast<size_t>(id)];
}

std::vector<int> TokenSequence::full_ids() const {
  std::vector<int> ids;
  ids.reserve(inner.size() + 2);
  ids.push_back(bos);
  ids.insert(ids.end(), inner.begin(), inner.end());
  ids.push_back(eos);
  return ids;
}

TokenSequence make_token_sequence(const Tokenizer& tok,
                                  const std::string& text) {
  TokenSequence seq;
  seq.bos = tok.bos_id();
  seq.eos = tok.eos_id();
  seq.inner = tok.encode(text);
  if (seq.inner.empty())
    throw std::invalid_argument(
        "make_token_sequence: text tokenizes to nothing: \"" + text + "\"");
  return seq;
}

std::vector<std::string> RuleBasedExtractor::extract(
    const std::string& text) const {
  const std::vector<std::string> words = Tokenizer::split_words(text);
  std::vector<WordTag> tags(words.size());
  for (size_t i = 0; i < words.size(); ++i) tags[i] = tag_word(words[i]);

  std::vector<std::string> phrases;
  std::set<std::string> seen;
  size_t i = 0;
  while (i < words.size()) {
    size_t j = i;
    while (j < words.size() && tags[j] == WordTag::adjective) ++j;
    if (j < words.size() && tags[j] == WordTag::noun) {
      size_t k = j;
      while (k < words.size() && tags[k] == WordTag::noun) ++k;
      std::string phrase;
      for (size_t p = i; p < k; ++p) {
        if (!phrase.empty()) phrase += ' ';
        phrase += words[p];
      }
      if (seen.insert(phrase).second) phrases.push_back(phrase);
      i = k;
    } else {
      i = (j == i) ? i + 1 : j;
    }
  }
  return phrases;
}

std::vector<std::string> extract_noun_phrases(
    const std::string& text, const NounPhraseExtractor& extractor) {
  return extractor.extract(text);
}

PriorMode parse_prior_mode(const std::string& s) {
  if (s == "none") return PriorMode::none;
  if (s == "plain") return PriorMode::plain;
  if (s == "np") return PriorMode::np;
  throw std::invalid_argument("unknown prior mode '" + s +
                              "' (expected none, plain or np)");
}

std::string prior_mode_name(PriorMode m) {
  switch (m) {
    case PriorMode::none: return "none";
    case PriorMode::plain: return "plain";
    case PriorMode::np: return "np";
  }
  return "none";
}

TokenSequence build_llm_input(const ClassSpec& cls, int template_id,
                              PriorMode mode, const TemplateSet& templates,
                              const Tokenizer& tok) {
  std::string text = render_query(cls.name, template_id, templates);
  if (mode == PriorMode::plain) {
    const ResponseRecord* rec = nullptr;
    for (const auto& r : cls.responses)
      if (r.template_id == template_id) {
        rec = &r;
        break;
      }
    if (!rec)
      throw std::runtime_error("build_llm_input: class \"" + cls.name +
                               "\" has no response for template " +
                               std::to_string(template_id) +
                               " (required by prior mode plain)");
    text += " " + rec->response_text;
  } else if (mode == PriorMode::np) {
    if (cls.noun_phrases.empty())
      throw std::runtime_error("build_llm_input: class \"" + cls.name +
                               "\" has no parsed noun phrases (required by "
                               "prior mode np)");
    text += " ";
    for (size_t i = 0; i < cls.noun_phrases.size(); ++i) {
      if (i) text += ", ";
      text += cls.noun_phrases[i];
    }
  }
  return make_token_sequence(tok, text);
}

std::vector<std::string> augment_clip_templates(const ClassSpec& cls,
                                                const TemplateSet& templates) {
  std::vector<std::string> out;
  for (const auto& t : templates.clip_templates) {
    if (t.find("[NP]") != std::string::npos) {
      for (const auto& np : cls.noun_phrases)
        out.push_back(render_template(t, cls.name, np));
    } else {
      out.push_back(render_template(t, cls.name));
    }
  }
  return out;
}

std::vector<ResponseRecord> load_response_store(
    const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open response store: " + path.string());
  std::vector<ResponseRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      ResponseRecord r;
      r.class_name = j.at("class_name");
      r.template_id = j.at("template_id");
      r.response_text = j.at("response_text");
      r.parsed_noun_phrases =
          j.at("parsed_noun_phrases").get<std::vector<std::string>>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("response store " + path.string() + " line " +
                               std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

void save_response_store(const std::filesystem::path& path,
                         const std::vector<ResponseRecord>& records) {
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot open response store for write: " +
                             path.string());
  for (const auto& r : records) {
    nlohmann::json j = {{"class_name", r.class_name},
                        {"template_id", r.template_id},
                        {"response_text", r.response_text},
                        {"parsed_noun_phrases", r.parsed_noun_phrases}};
    os << j.dump() << "\n";
  }
}

void attach_responses(std::vector<ClassSpec>& classes,
                      const std::vector<ResponseRecord>& records) {
  for (auto& cls : classes) {
    cls.responses.clear();
    cls.noun_phrases.clear();
    std::set<std::string> seen;
    for (const auto& r : records) {
      if (r.class_name != cls.name) continue;
      cls.responses.push_back(r);
      for (const auto& np : r.parsed_noun_phrases)
        if (seen.insert(np).second) cls.noun_phrases.push_back(np);
    }
  }
}

}  // namespace llamp
