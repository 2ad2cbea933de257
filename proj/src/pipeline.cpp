#include "cotrr/pipeline.hpp"

#include <set>
#include <sstream>
#include <unordered_set>

#include "cotrr/digest.hpp"
#include "cotrr/parallel.hpp"

namespace cotrr {

namespace {

struct StructuredCall {
  std::string reply;
  std::string error;  // last parse error, empty on success
};

ChatRequest make_request(const PipelineOptions& options, std::vector<ContentPart> user_parts) {
  ChatRequest req;
  req.model = options.model;
  req.temperature = options.temperature;
  req.messages.push_back({Role::system, {TextPart{options.prompts->system}}});
  req.messages.push_back({Role::user, std::move(user_parts)});
  return req;
}

// Issues `request`, parses with `parse`, and re-prompts once on a parse failure.
// Backend errors propagate. Returns the parsed value or nullopt with the last error.
template <class T, class Parse>
std::optional<T> call_structured(ChatBackend& backend, const ChatRequest& request, Parse parse,
                                 const PipelineOptions& options, const std::string& stage, int candidate_index,
                                 CallLog* log, StructuredCall& out) {
  auto attempt = [&](const ChatRequest& req, const std::string& tag) -> std::optional<T> {
    CallRecord rec;
    rec.stage = tag;
    rec.candidate_index = candidate_index;
    rec.request_digest = cache_key(req);
    ChatResponse resp;
    try {
      resp = backend.chat(req);
    } catch (const BackendError& e) {
      rec.parse_status = "backend_error";
      rec.detail = e.what();
      if (log) log->push_back(std::move(rec));
      throw;
    }
    rec.response_digest = sha256_hex(resp.text);
    rec.attempts = resp.attempts;
    rec.from_cache = resp.from_cache;
    out.reply = resp.text;
    Parsed<T> parsed = parse(resp.text);
    if (ok(parsed)) {
      rec.parse_status = "ok";
      out.error.clear();
      if (log) log->push_back(std::move(rec));
      return std::get<T>(std::move(parsed));
    }
    out.error = std::get<ParseError>(parsed).message;
    rec.parse_status = "parse_error";
    rec.detail = out.error;
    if (log) log->push_back(std::move(rec));
    return std::nullopt;
  };

  if (auto value = attempt(request, stage)) return value;

  ChatRequest repair = request;
  std::string quoted = "Your previous reply was:\n<<<\n" + out.reply + "\n>>>\n\n";
  quoted += render_template(options.prompts->repair, {{"error", out.error}});
  repair.messages.push_back({Role::user, {TextPart{std::move(quoted)}}});
  return attempt(repair, stage + ":repair");
}

std::string render_components(const SemanticDecomposition& d) {
  std::string out;
  for (const auto& c : d.components) {
    if (!out.empty()) out += '\n';
    out += "- " + c.name + ": " + c.description;
  }
  return out;
}

std::string render_evaluations(const std::vector<CandidateEvaluation>& evaluations) {
  std::ostringstream os;
  for (std::size_t i = 0; i < evaluations.size(); ++i) {
    const auto& ev = evaluations[i];
    if (i > 0) os << '\n';
    os << '[' << (i + 1) << "] overall judgment: " << display_label(ev.overall);
    if (ev.degraded) {
      os << " (evaluation unavailable)";
      continue;
    }
    for (const auto& note : ev.notes) {
      os << "\n    - " << note.name << ": " << to_string(note.verdict);
      if (!note.rationale.empty()) os << ". " << note.rationale;
    }
  }
  return os.str();
}

CandidateEvaluation degraded_evaluation(const std::string& id, const SemanticDecomposition& d, std::string why) {
  CandidateEvaluation ev;
  ev.candidate_id = id;
  ev.overall = Judgment::no_match;
  ev.degraded = true;
  ev.failure = std::move(why);
  for (const auto& c : d.components) ev.notes.push_back({c.name, Verdict::unmet, ""});
  return ev;
}

RankedList initial_order(const std::vector<std::string>& ids) {
  return {ids, std::vector<Placement>(ids.size(), Placement::repaired)};
}

// Maps 1-based indices from the model onto ids; out-of-range indices become foreign tokens.
std::vector<std::string> indices_to_ids(const std::vector<long long>& indices, const std::vector<std::string>& ids) {
  std::vector<std::string> out;
  out.reserve(indices.size());
  for (long long idx : indices) {
    if (idx >= 1 && static_cast<std::size_t>(idx) <= ids.size()) {
      out.push_back(ids[static_cast<std::size_t>(idx - 1)]);
    } else {
      out.push_back("\x01out-of-range:" + std::to_string(idx));
    }
  }
  return out;
}

std::string flatten_dialogue(const DialogueQuery& d) {
  std::string out = d.caption;
  for (const auto& t : d.turns) out += ". Q: " + t.question + " A: " + t.answer;
  return out;
}

Query as_pipeline_query(const Query& query) {
  if (const auto* d = std::get_if<DialogueQuery>(&query)) return TextQuery{flatten_dialogue(*d)};
  return query;
}

struct StageContext {
  const Query& query;
  std::optional<ImagePart> reference;  // composed queries only
};

CandidateEvaluation evaluate_image(const ImagePart& image, const std::string& id, const SemanticDecomposition& d,
                                   const StageContext* raw_context, ChatBackend& backend,
                                   const PipelineOptions& options, int candidate_index, CallLog* log) {
  std::vector<ContentPart> parts;
  if (raw_context == nullptr) {
    parts.push_back(TextPart{render_template(options.prompts->evaluate, {{"components", render_components(d)}})});
  } else if (const auto* c = std::get_if<ComposedQuery>(&raw_context->query)) {
    parts.push_back(TextPart{
        render_template(options.prompts->evaluate_composed_query, {{"manipulation_text", c->manipulation_text}})});
    parts.push_back(TextPart{"Reference image:"});
    parts.push_back(*raw_context->reference);
    parts.push_back(TextPart{"Candidate image:"});
  } else {
    parts.push_back(TextPart{
        render_template(options.prompts->evaluate_query, {{"query_text", std::get<TextQuery>(raw_context->query).text}})});
  }
  parts.push_back(image);

  StructuredCall call;
  auto parse = [&](std::string_view reply) { return parse_evaluation(reply, d, id); };
  auto ev = call_structured<CandidateEvaluation>(backend, make_request(options, std::move(parts)), parse, options,
                                                 "evaluate", candidate_index, log, call);
  if (ev) return std::move(*ev);
  return degraded_evaluation(id, d, "unparseable evaluation: " + call.error);
}

ListwiseOutcome rank_with_images(const std::string& prompt, const std::optional<ImagePart>& reference,
                                 const std::vector<ImagePart>& images, const std::vector<std::string>& ids,
                                 ChatBackend& backend, const PipelineOptions& options, CallLog* log) {
  std::vector<ContentPart> parts{TextPart{prompt}};
  if (reference) parts.push_back(*reference);
  for (std::size_t i = 0; i < images.size(); ++i) {
    parts.push_back(TextPart{"[" + std::to_string(i + 1) + "]"});
    parts.push_back(images[i]);
  }
  ListwiseOutcome out;
  StructuredCall call;
  try {
    auto order = call_structured<std::vector<long long>>(backend, make_request(options, std::move(parts)),
                                                         parse_ranking, options, "rank", -1, log, call);
    if (order) {
      out.ranking = repair_permutation(indices_to_ids(*order, ids), ids);
      return out;
    }
    out.error = "unparseable ranking: " + call.error;
  } catch (const BackendError& e) {
    out.error = e.what();
  }
  out.ranking = initial_order(ids);
  out.fallback = true;
  return out;
}

}  // namespace

void validate_query(const Query& query) {
  if (const auto* t = std::get_if<TextQuery>(&query)) {
    if (t->text.empty()) throw std::invalid_argument("text query is empty");
  } else if (const auto* c = std::get_if<ComposedQuery>(&query)) {
    if (c->reference_image.empty()) throw std::invalid_argument("composed query needs a reference image");
    if (c->manipulation_text.empty()) throw std::invalid_argument("composed query needs a manipulation text");
  } else {
    const auto& d = std::get<DialogueQuery>(query);
    if (d.caption.empty()) throw std::invalid_argument("dialogue query needs a caption");
  }
}

std::string raw_query_text(const Query& query) {
  if (const auto* t = std::get_if<TextQuery>(&query)) return t->text;
  if (const auto* c = std::get_if<ComposedQuery>(&query)) return c->manipulation_text;
  return flatten_dialogue(std::get<DialogueQuery>(query));
}

SemanticDecomposition deconstruct(const Query& query, ChatBackend& backend, const PipelineOptions& options,
                                  CallLog* log) {
  validate_query(query);
  std::vector<ContentPart> parts;
  if (const auto* t = std::get_if<TextQuery>(&query)) {
    parts.push_back(TextPart{render_template(options.prompts->deconstruct_text, {{"query_text", t->text}})});
  } else if (const auto* c = std::get_if<ComposedQuery>(&query)) {
    parts.push_back(TextPart{
        render_template(options.prompts->deconstruct_composed, {{"manipulation_text", c->manipulation_text}})});
    parts.push_back(load_image_for_transmission(c->reference_image, options.encoding));
  } else {
    throw std::invalid_argument("dialogue queries must be flattened to text before deconstruction");
  }

  StructuredCall call;
  auto parse = [&](std::string_view reply) { return parse_decomposition(reply, options.component_names); };
  auto d = call_structured<SemanticDecomposition>(backend, make_request(options, std::move(parts)), parse, options,
                                                  "deconstruct", -1, log, call);
  if (!d) throw DeconstructionError("query deconstruction failed: " + call.error, call.reply);
  return std::move(*d);
}

CandidateEvaluation evaluate_candidate(const std::filesystem::path& candidate_image, const std::string& candidate_id,
                                       const SemanticDecomposition& decomposition, ChatBackend& backend,
                                       const PipelineOptions& options, CallLog* log) {
  const ImagePart image = load_image_for_transmission(candidate_image, options.encoding);
  return evaluate_image(image, candidate_id, decomposition, nullptr, backend, options, -1, log);
}

ListwiseOutcome rank_listwise(const std::vector<CandidateEvaluation>& evaluations, ChatBackend& backend,
                              const PipelineOptions& options, CallLog* log,
                              const std::vector<CandidateImage>* thumbnails) {
  if (evaluations.empty()) throw std::invalid_argument("rank_listwise needs at least one evaluation");
  std::vector<std::string> ids;
  ids.reserve(evaluations.size());
  std::unordered_set<std::string> seen;
  for (const auto& ev : evaluations) {
    if (!seen.insert(ev.candidate_id).second) {
      throw std::invalid_argument("duplicate candidate id '" + ev.candidate_id + "'");
    }
    ids.push_back(ev.candidate_id);
  }

  std::vector<ContentPart> parts{TextPart{render_template(
      options.prompts->rank,
      {{"evaluations", render_evaluations(evaluations)}, {"k", std::to_string(evaluations.size())}})}};
  if (options.attach_thumbnails && thumbnails != nullptr) {
    ImageEncoding thumb = options.encoding;
    thumb.max_side = std::min(thumb.max_side, 128);
    for (std::size_t i = 0; i < thumbnails->size(); ++i) {
      parts.push_back(TextPart{"[" + std::to_string(i + 1) + "]"});
      parts.push_back(load_image_for_transmission((*thumbnails)[i].image, thumb));
    }
  }

  ListwiseOutcome out;
  StructuredCall call;
  try {
    auto order = call_structured<std::vector<long long>>(backend, make_request(options, std::move(parts)),
                                                         parse_ranking, options, "rank", -1, log, call);
    if (order) {
      out.ranking = repair_permutation(indices_to_ids(*order, ids), ids);
      return out;
    }
    out.error = "unparseable ranking: " + call.error;
  } catch (const BackendError& e) {
    out.error = e.what();
  }
  out.ranking = initial_order(ids);
  out.fallback = true;
  return out;
}

RankedList repair_permutation(const std::vector<std::string>& model_order,
                              const std::vector<std::string>& original_order) {
  if (original_order.empty()) throw std::invalid_argument("repair_permutation: original order is empty");
  std::unordered_set<std::string> allowed(original_order.begin(), original_order.end());
  if (allowed.size() != original_order.size()) {
    throw std::invalid_argument("repair_permutation: original order has duplicate ids");
  }
  RankedList out;
  std::unordered_set<std::string> placed;
  for (const auto& id : model_order) {
    if (allowed.count(id) && placed.insert(id).second) {
      out.ids.push_back(id);
      out.provenance.push_back(Placement::model);
    }
  }
  for (const auto& id : original_order) {
    if (placed.insert(id).second) {
      out.ids.push_back(id);
      out.provenance.push_back(Placement::repaired);
    }
  }
  return out;
}

RerankResult rerank(const Query& input_query, const std::vector<CandidateImage>& candidates, ChatBackend& backend,
                    Mode mode, const PipelineOptions& options, const PriorArtifacts* prior) {
  if (candidates.empty()) throw std::invalid_argument("rerank needs at least one candidate");
  validate_query(input_query);
  const Query query = as_pipeline_query(input_query);

  std::vector<std::string> ids;
  ids.reserve(candidates.size());
  {
    std::unordered_set<std::string> seen;
    for (const auto& c : candidates) {
      if (!seen.insert(c.id).second) throw std::invalid_argument("duplicate candidate id '" + c.id + "'");
      ids.push_back(c.id);
    }
  }

  StageContext context{query, std::nullopt};
  if (const auto* c = std::get_if<ComposedQuery>(&query)) {
    context.reference = load_image_for_transmission(c->reference_image, options.encoding);
  }

  RerankResult result;

  if (uses_deconstruction(mode)) {
    if (prior && prior->decomposition) {
      result.decomposition = prior->decomposition;
    } else {
      try {
        result.decomposition = deconstruct(query, backend, options, &result.transcript);
      } catch (const DeconstructionError& e) {
        result.errors.push_back(e.what());
      } catch (const BackendError& e) {
        result.errors.push_back(std::string("deconstruction: ") + e.what());
      }
      if (!result.decomposition) {
        result.decomposition = raw_query_decomposition(raw_query_text(query));
        result.decomposition_degraded = true;
      }
    }
  }

  // Images are needed by every mode except when all evaluations are reused.
  std::vector<std::optional<ImagePart>> images(candidates.size());
  auto image_at = [&](std::size_t i) -> const ImagePart& {
    if (!images[i]) images[i] = load_image_for_transmission(candidates[i].image, options.encoding);
    return *images[i];
  };

  if (uses_evaluation(mode)) {
    const SemanticDecomposition eval_basis =
        mode == Mode::RE ? raw_query_decomposition(raw_query_text(query)) : *result.decomposition;
    const StageContext* raw = mode == Mode::RE ? &context : nullptr;

    std::vector<std::optional<CandidateEvaluation>> slots(candidates.size());
    std::vector<CallLog> logs(candidates.size());
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (prior) {
        if (auto it = prior->evaluations.find(candidates[i].id); it != prior->evaluations.end()) {
          slots[i] = it->second;
          continue;
        }
      }
      todo.push_back(i);
    }
    // Load up front so workers never touch the shared image vector.
    for (std::size_t i : todo) image_at(i);
    parallel_for(todo.size(), options.parallelism, [&](std::size_t t) {
      const std::size_t i = todo[t];
      try {
        slots[i] = evaluate_image(*images[i], candidates[i].id, eval_basis, raw, backend, options,
                                  static_cast<int>(i), &logs[i]);
      } catch (const BackendError& e) {
        slots[i] = degraded_evaluation(candidates[i].id, eval_basis, std::string("backend: ") + e.what());
      }
    });
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      result.evaluations.push_back(std::move(*slots[i]));
      for (auto& rec : logs[i]) result.transcript.push_back(std::move(rec));
      if (result.evaluations.back().degraded) ++result.degraded_evaluations;
    }

    ListwiseOutcome ranked = rank_listwise(result.evaluations, backend, options, &result.transcript, &candidates);
    result.ranking = std::move(ranked.ranking);
    result.ranking_fallback = ranked.fallback;
    if (!ranked.error.empty()) result.errors.push_back("ranking: " + ranked.error);
    return result;
  }

  std::vector<ImagePart> all_images;
  all_images.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) all_images.push_back(image_at(i));
  const std::string k = std::to_string(candidates.size());
  std::string prompt;
  std::optional<ImagePart> reference;
  if (mode == Mode::RD) {
    prompt = render_template(options.prompts->rank_images_components,
                             {{"components", render_components(*result.decomposition)}, {"k", k}});
  } else if (const auto* c = std::get_if<ComposedQuery>(&query)) {
    prompt = render_template(options.prompts->rank_images_composed_query,
                             {{"manipulation_text", c->manipulation_text}, {"k", k}});
    reference = context.reference;
  } else {
    prompt = render_template(options.prompts->rank_images_query,
                             {{"query_text", std::get<TextQuery>(query).text}, {"k", k}});
  }
  ListwiseOutcome ranked = rank_with_images(prompt, reference, all_images, ids, backend, options, &result.transcript);
  result.ranking = std::move(ranked.ranking);
  result.ranking_fallback = ranked.fallback;
  if (!ranked.error.empty()) result.errors.push_back("ranking: " + ranked.error);
  return result;
}

}  // namespace cotrr
