#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace llamp {

// Pre-generated description for one (class, query template) pair.
struct ResponseRecord {
  std::string class_name;
  int template_id = 0;
  std::string response_text;
  std::vector<std::string> parsed_noun_phrases;

  bool operator==(const ResponseRecord&) const = default;
};

struct ClassSpec {
  int label_id = 0;
  std::string name;
  std::vector<ResponseRecord> responses;
  std::vector<std::string> noun_phrases;  // deduplicated, first-appearance order
};

// Query templates for the language model ("[STH]" slot) and caption
// templates for the text encoder ("[STH]" required, "[NP]" optional).
struct TemplateSet {
  std::vector<std::string> llm_templates;
  std::vector<std::string> clip_templates;

  static TemplateSet builtin();
  static TemplateSet from_json_file(const std::filesystem::path& path);
  void validate() const;
};

std::string render_template(const std::string& tmpl, const std::string& name,
                            const std::string& noun_phrase = std::string());
std::string render_query(const std::string& name, int template_id,
                         const TemplateSet& templates);

// Noun-phrase extraction behind a pluggable interface; the built-in engine
// is a deterministic rule-based chunker over a bundled lexicon.
class NounPhraseExtractor {
 public:
  virtual ~NounPhraseExtractor() = default;
  virtual std::vector<std::string> extract(const std::string& text) const = 0;
};

// Tokenizes on whitespace/punctuation, tags tokens with a closed-class
// stopword/verb/adjective/noun lexicon ("-ly" words count as adverbs,
// unknown words are ignored) and emits maximal (ADJ)* NOUN+ chunks,
// lowercased, deduplicated, in order of first appearance.
class RuleBasedExtractor final : public NounPhraseExtractor {
 public:
  std::vector<std::string> extract(const std::string& text) const override;
};

std::vector<std::string> extract_noun_phrases(const std::string& text,
                                              const NounPhraseExtractor& extractor);

// Word + punctuation tokenizer with a fixed vocabulary; out-of-vocabulary
// tokens map to a single UNK id. Shared by the decoder and the text encoder.
class Tokenizer {
 public:
  static Tokenizer build(const std::vector<std::string>& corpus);
  static std::vector<std::string> split_words(const std::string& text);

  std::vector<int> encode(const std::string& text) const;
  const std::string& token_text(int id) const;
  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  int unk_id() const { return 0; }
  int bos_id() const { return 1; }
  int eos_id() const { return 2; }

  std::vector<std::string> vocabulary() const { return id_to_token_; }

 private:
  std::map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Token sequence in the shape every encoder input takes: bos, inner tokens,
// eos. length() counts the inner tokens only.
struct TokenSequence {
  int bos = 0;
  std::vector<int> inner;
  int eos = 0;

  int length() const { return static_cast<int>(inner.size()); }
  int total() const { return length() + 2; }
  std::vector<int> full_ids() const;
};

TokenSequence make_token_sequence(const Tokenizer& tok, const std::string& text);

enum class PriorMode { none, plain, np };
PriorMode parse_prior_mode(const std::string& s);
std::string prior_mode_name(PriorMode m);

// Assembles the decoder input for one (class, template) pair: the rendered
// query, optionally followed by the pre-generated response text (plain) or
// its comma-joined noun phrases (np).
TokenSequence build_llm_input(const ClassSpec& cls, int template_id,
                              PriorMode mode, const TemplateSet& templates,
                              const Tokenizer& tok);

// Cross product of the "[NP]"-bearing caption templates with the class noun
// phrases, plus the plain templates, in template-major order.
std::vector<std::string> augment_clip_templates(const ClassSpec& cls,
                                                const TemplateSet& templates);

// JSON Lines store of ResponseRecords, one per line, UTF-8.
std::vector<ResponseRecord> load_response_store(const std::filesystem::path& path);
void save_response_store(const std::filesystem::path& path,
                         const std::vector<ResponseRecord>& records);

// Groups records under their classes and fills class-level noun phrase
// lists (deduplicated union in first-appearance order).
void attach_responses(std::vector<ClassSpec>& classes,
                      const std::vector<ResponseRecord>& records);

}  // namespace llamp
