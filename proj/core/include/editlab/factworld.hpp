#pragma once

#include "editlab/model.hpp"

#include <optional>
#include <string>
#include <unordered_map>

namespace editlab {

// Synthetic fact universe: a closed word-level vocabulary, relation schemas
// with one edit template and >= 2 paraphrase templates each, (s, r, o) facts
// with single-token objects, a pretraining corpus, and 50 held-out probe
// utterances used as the collapse proxy.

class Vocab {
public:
    Token add(const std::string& word);
    Token get(const std::string& word) const;  // throws InputError on unknown
    const std::string& word(Token t) const;
    TokenSeq encode(const std::string& text) const;
    std::string decode(const TokenSeq& tokens) const;
    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, Token> index_;
};

// One subject slot between `before` and `after`.
struct PromptTemplate {
    TokenSeq before, after;
    std::string text(const Vocab& v) const;  // "... {} ..."
};

struct Rendered {
    TokenSeq tokens;
    int subject_end = 0;  // t, index of the last subject token
};

/// Renders prefix + template(subject); subject_end accounts for the prefix.
Rendered render_prompt(const PromptTemplate& tmpl, const TokenSeq& subject,
                       const TokenSeq& prefix = {});

struct FactTriple {
    TokenSeq subject;
    int relation = 0;
    Token object = 0;
};

struct RelationSchema {
    int id = 0;
    PromptTemplate edit_template;
    std::vector<PromptTemplate> paraphrases;  // >= 2, distinct from edit template
    std::vector<Token> object_pool;           // >= 3 single-token objects
};

struct WorldSpec {
    std::uint64_t seed = 7;
    int n_subjects = 200;
    int n_relations = 8;
    int pool_size = 6;
    int n_probes = 50;
    int paraphrases_per_relation = 2;
    int prefixed_corpus_copies = 2;  // prefixed fact renderings added to the corpus
    int max_vocab = 0;               // 0 = unlimited; else ConfigError on overflow
};

struct FactWorld {
    WorldSpec spec;
    Vocab vocab;
    std::vector<RelationSchema> schemas;
    std::vector<FactTriple> facts;
    std::vector<TokenSeq> pretrain_corpus;
    std::vector<TokenSeq> probe_utterances;
    std::vector<Token> frequent_tokens;  // prefix sampling pool

    // facts sharing (relation, object) with facts[i], excluding i
    std::vector<int> neighbors_of(int fact_index) const;

    Rendered fact_prompt(int fact_index, const TokenSeq& prefix = {}) const;
    std::vector<Rendered> paraphrase_prompts(int fact_index) const;
    TokenSeq subject_only(int fact_index) const;

    /// (edit prompt, object) pairs for top-1 recall scans.
    std::vector<std::pair<TokenSeq, Token>> recall_probes() const;
};

FactWorld generate_world(const WorldSpec& spec);

struct EditRequest {
    int id = 0;
    int fact_index = 0;
    Token new_object = 0;                // o* != o, from the relation's pool
    std::optional<int> assist_neighbor;  // fact index
    std::vector<int> eval_neighbors;     // fact indices, disjoint from assist
};

struct EditBatch {
    std::vector<EditRequest> requests;
    std::vector<TokenSeq> prefix_pool;
    std::uint64_t seed = 0;
    int requested_m = 0;
    int shortfall = 0;            // requested edits beyond the eligible supply
    int excluded_infeasible = 0;  // facts skipped for lacking 2 neighbors
};

EditBatch make_edit_batch(const FactWorld& world, int m, int n_prefixes, std::uint64_t seed);

struct FilterReport {
    int neighbors_removed = 0;
    int requests_dropped = 0;
    int assists_promoted = 0;
};

/// Drops neighbor prompts whose top-1 prediction is not the recorded object
/// (ties fail); requests keep 1 assist + >= 1 eval neighbor or are dropped.
EditBatch filter_neighbors(const ToyLM& model, const FactWorld& world, const EditBatch& batch,
                           FilterReport* report = nullptr);

// file formats (JSON world, JSONL dataset + batch sidecar), versioned
void save_world(const FactWorld& world, const std::string& path);
FactWorld load_world(const std::string& path);
void save_edit_batch(const FactWorld& world, const EditBatch& batch,
                     const std::string& jsonl_path, const std::string& meta_path);
EditBatch load_edit_batch(const FactWorld& world, const std::string& jsonl_path,
                          const std::string& meta_path);

}  // namespace editlab
