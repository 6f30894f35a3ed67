#ifndef HADKIT_H
#define HADKIT_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum HadkitStatus {
  HADKIT_STATUS_OK = 0,
  HADKIT_STATUS_NULL_POINTER = 1,
  HADKIT_STATUS_INVALID_UTF8 = 2,
  // Malformed input text (TOML, JSON).
  HADKIT_STATUS_PARSE = 3,
  // Input parsed but violates a record or taxonomy rule.
  HADKIT_STATUS_SCHEMA = 4,
  // Predictions do not line up with gold records.
  HADKIT_STATUS_ALIGNMENT = 5,
  // A type name is not in the taxonomy.
  HADKIT_STATUS_UNKNOWN_TYPE = 6,
  HADKIT_STATUS_INTERNAL = 7,
} HadkitStatus;

// Shape of a parsed label.
typedef enum HadkitLabelKind {
  // One of the taxonomy types; the label text is its display name.
  HADKIT_LABEL_KIND_TYPE = 0,
  HADKIT_LABEL_KIND_NO_HALLUCINATION = 1,
  // Binary-mode positive without a type.
  HADKIT_LABEL_KIND_HALLUCINATED = 2,
  // Unparseable or unknown label.
  HADKIT_LABEL_KIND_INVALID = 3,
} HadkitLabelKind;

// Prompt family for detection.
typedef enum HadkitMode {
  HADKIT_MODE_FINE_GRAINED = 0,
  HADKIT_MODE_BINARY = 1,
  // Few-shot baseline with the built-in examples.
  HADKIT_MODE_BASELINE = 2,
} HadkitMode;

// Opaque parsed detection response.
typedef struct HadkitDetection HadkitDetection;

// Opaque taxonomy handle.
typedef struct HadkitTaxonomy HadkitTaxonomy;

typedef struct HadkitPrf {
  double precision;
  double recall;
  double f1;
} HadkitPrf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Latest error message on this thread, or null. Borrowed; valid until the
// next failing call on the same thread.
const char *hadkit_last_error(void);

// # Safety
// `s` must be null or a string produced by this library and not yet freed.
void hadkit_string_free(char *s);

// Built-in taxonomy. Never null; free with [`hadkit_taxonomy_free`].
struct HadkitTaxonomy *hadkit_taxonomy_builtin(void);

// # Safety
// `toml` must be a valid nul-terminated string and `out` a writable pointer.
enum HadkitStatus hadkit_taxonomy_from_toml(const char *toml, struct HadkitTaxonomy **out);

// # Safety
// `t` must be null or a handle from this library not yet freed.
void hadkit_taxonomy_free(struct HadkitTaxonomy *t);

// Resolves a label string (type name, alias or "No Hallucination").
// On success, `out_kind` gets the label shape and `out_name` the canonical
// name, to be freed by the caller. An unknown name yields `UnknownType`.
//
// # Safety
// Pointers must be valid; `t` a live taxonomy handle.
enum HadkitStatus hadkit_parse_label(const struct HadkitTaxonomy *t,
                                     const char *raw,
                                     enum HadkitLabelKind *out_kind,
                                     char **out_name);

// Renders the detection prompt for one (input, output) pair.
//
// # Safety
// Pointers must be valid; `t` a live taxonomy handle.
enum HadkitStatus hadkit_build_detection_prompt(const struct HadkitTaxonomy *t,
                                                enum HadkitMode mode,
                                                const char *task_input,
                                                const char *task_output,
                                                char **out);

// Parses a detector response. Unparseable text still succeeds, with kind
// `Invalid`. Free the result with [`hadkit_detection_free`].
//
// # Safety
// Pointers must be valid; `t` a live taxonomy handle.
enum HadkitStatus hadkit_detection_parse(const struct HadkitTaxonomy *t,
                                         enum HadkitMode mode,
                                         const char *raw,
                                         struct HadkitDetection **out);

// # Safety
// `d` must be a live detection handle.
enum HadkitLabelKind hadkit_detection_kind(const struct HadkitDetection *d);

// Label text: type display name, "No Hallucination", "Hallucination", or
// the offending text for invalid labels.
//
// # Safety
// `d` must be a live detection handle.
const char *hadkit_detection_label(const struct HadkitDetection *d);

// # Safety
// `d` must be a live detection handle.
const char *hadkit_detection_span(const struct HadkitDetection *d);

// # Safety
// `d` must be a live detection handle.
const char *hadkit_detection_correction(const struct HadkitDetection *d);

// # Safety
// `d` must be null or a live detection handle.
void hadkit_detection_free(struct HadkitDetection *d);

// Word-multiset precision, recall and F1 of `pred` against `gold`.
//
// # Safety
// Pointers must be valid.
enum HadkitStatus hadkit_word_prf(const char *gold, const char *pred, struct HadkitPrf *out);

// Scores JSONL predictions against JSONL gold records. On success `out_json`
// receives the metrics report as JSON.
//
// # Safety
// Pointers must be valid.
enum HadkitStatus hadkit_evaluate_jsonl(const char *gold_jsonl,
                                        const char *preds_jsonl,
                                        char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HADKIT_H */
