//! Query-elicitation prompt assembly and output parsing.

use crate::error::{Error, Result};

pub const QUERY_END_SENTINEL: &str = "|||||";

pub const TEXT_BEGIN_DELIMITER: &str = "======= Text Begins Here =======";
pub const TEXT_END_DELIMITER: &str = "======= Text Ends Here =======";

const QUERY_TYPE_HINTS: &str = r#"1. Ask for a concise summary that captures the main points and essential details of the text. Anticipate user requests such as, "What are the central arguments?" or "Can you summarize the main events of the story?"
2. Formulate questions about key details or themes within the text, such as "What achievements did Anthony Joshua achieve in boxing?" or "What was the date and venue of event?"
3. Identify and explore patterns or examples, create similar formatted examples or pose questions, such as "What is the labeling criteria for these examples?"
4. Integrate and reflect on new knowledge from the text, asking for the implications and applications of the new knowledge.
5. Request repetition of specific sentences or paragraphs from the text.
6. ..."#;

/// Wrap a query for the teacher/student scoring prompts. The teacher scores
/// responses under `[context ∥ query_template(q)]`, the student under
/// `query_template(q)` alone.
pub fn query_template(query: &str) -> String {
    format!("Query:\n{query}\nResponse:\n")
}

/// The hybrid prompt that steers the model to enumerate likely user queries
/// about the embedded text: a guideline, a hinting list of query types with
/// examples (stated twice, before and after the text), and a numbered output
/// format ending with the `|||||` sentinel.
pub fn build_query_prompt(context_text: &str, queries_per_prompt: usize) -> String {
    let n = queries_per_prompt;
    format!(
        "Please prepare to analyze the text provided below. As you read, simulate real-world \
user queries about the content, such as summarizing, detailing, or inferring knowledge.\n\
For example, consider the following potential user queries if applicable to the provided text:\n\
{QUERY_TYPE_HINTS}\n\
Here is the text for analysis:\n\
{TEXT_BEGIN_DELIMITER}\n\
{context_text}\n\
{TEXT_END_DELIMITER}\n\
Let's review the potential user queries to see if they apply to the provided text.\n\
{QUERY_TYPE_HINTS}\n\
Determine suitable query types for the text and generate a comprehensive set of queries \
that thoroughly cover the content.\n\
Make the subject of the query clear and avoid using pronouns like \"it,\" \"he,\" or \"she\" \
to prevent ambiguity.\n\
Output {n} queries directly, each on a separate line, numbered from \"1.\" to \"{n}.\" \
Conclude with \"{QUERY_END_SENTINEL}\" as the end symbol."
    )
}

/// Extract numbered queries (`N. <text>`) from raw model output, stopping at
/// the `|||||` sentinel or end of text. Numbering gaps and extra whitespace
/// are tolerated; empty queries are dropped; at most `expected` queries are
/// returned. Zero parsed queries is an explicit error carrying the raw text.
pub fn parse_queries(raw: &str, expected: usize) -> Result<Vec<String>> {
    let mut queries = Vec::new();
    'lines: for line in raw.lines() {
        let mut content = line;
        let mut stop_after = false;
        if let Some(pos) = content.find(QUERY_END_SENTINEL) {
            content = &content[..pos];
            stop_after = true;
        }
        if let Some(q) = parse_numbered_line(content) {
            if !q.is_empty() && queries.len() < expected {
                queries.push(q);
            }
        }
        if stop_after || queries.len() >= expected {
            break 'lines;
        }
    }
    if queries.is_empty() {
        return Err(Error::QueryParse {
            attempts: 1,
            raw: raw.to_string(),
        });
    }
    Ok(queries)
}

/// `"  12.  text"` → `Some("text")`; anything not shaped like a numbered
/// line → `None`.
fn parse_numbered_line(line: &str) -> Option<String> {
    let s = line.trim_start();
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits == 0 {
        return None;
    }
    let rest = &s[digits..];
    let rest = rest.strip_prefix('.')?;
    Some(rest.trim().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_contains_delimiters_and_sentinel_instruction() {
        let p = build_query_prompt("BODY TEXT", 20);
        assert!(p.contains(TEXT_BEGIN_DELIMITER));
        assert!(p.contains(TEXT_END_DELIMITER));
        assert!(p.contains("BODY TEXT"));
        assert!(p.contains("Output 20 queries directly"));
        assert!(p.trim_end().ends_with("Conclude with \"|||||\" as the end symbol."));
        // Context body sits between the delimiters.
        let begin = p.find(TEXT_BEGIN_DELIMITER).unwrap();
        let body = p.find("BODY TEXT").unwrap();
        let end = p.find(TEXT_END_DELIMITER).unwrap();
        assert!(begin < body && body < end);
    }

    #[test]
    fn prompt_handles_empty_context() {
        let p = build_query_prompt("", 20);
        assert!(p.contains(&format!("{TEXT_BEGIN_DELIMITER}\n\n{TEXT_END_DELIMITER}")));
    }

    #[test]
    fn parses_numbered_lines_and_stops_at_sentinel() {
        let raw = "1. What is X?\n2. Summarize.\n|||||";
        assert_eq!(
            parse_queries(raw, 20).unwrap(),
            vec!["What is X?".to_string(), "Summarize.".to_string()]
        );

        let raw2 = "1. a\n2. b\n|||||\n3. garbage after sentinel";
        assert_eq!(parse_queries(raw2, 20).unwrap(), vec!["a", "b"]);
    }

    #[test]
    fn caps_at_expected_count() {
        let raw = (1..=30)
            .map(|i| format!("{i}. q{i}"))
            .collect::<Vec<_>>()
            .join("\n");
        let qs = parse_queries(&raw, 20).unwrap();
        assert_eq!(qs.len(), 20);
        assert_eq!(qs[19], "q20");
    }

    #[test]
    fn zero_queries_is_an_error_with_raw_text() {
        match parse_queries("no numbers here\njust prose", 20) {
            Err(Error::QueryParse { raw, .. }) => assert!(raw.contains("just prose")),
            other => panic!("expected QueryParse, got {other:?}"),
        }
    }

    #[test]
    fn fuzzed_lines_match_reference_scanner() {
        // Independent oracle: regex-style manual scan of each line.
        fn oracle(raw: &str, expected: usize) -> Vec<String> {
            let mut out = Vec::new();
            for line in raw.lines() {
                let line = match line.find("|||||") {
                    Some(p) => {
                        let head = &line[..p];
                        if let Some(q) = oracle_line(head) {
                            if !q.is_empty() && out.len() < expected {
                                out.push(q);
                            }
                        }
                        return out;
                    }
                    None => line,
                };
                if let Some(q) = oracle_line(line) {
                    if !q.is_empty() && out.len() < expected {
                        out.push(q);
                    }
                }
                if out.len() >= expected {
                    break;
                }
            }
            out
        }
        fn oracle_line(line: &str) -> Option<String> {
            let t = line.trim_start();
            let first_nondigit = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
            if first_nondigit == 0 || !t[first_nondigit..].starts_with('.') {
                return None;
            }
            Some(t[first_nondigit + 1..].trim().to_string())
        }

        let mut rng = crate::rng::Rng::new(321);
        let fragments = [
            "1. plain",
            "  7.   spaced  ",
            "no number",
            "3.",
            "12.tight",
            "|||||",
            "4. with ||||| inline",
            "x5. not a number start",
            "",
            "08. zero padded",
        ];
        for case in 0..50 {
            let n = 1 + rng.below(8);
            let raw: Vec<&str> = (0..n)
                .map(|_| fragments[rng.below(fragments.len())])
                .collect();
            let raw = raw.join("\n");
            let got = parse_queries(&raw, 20).map(|v| v).unwrap_or_default();
            let want = oracle(&raw, 20);
            assert_eq!(got, want, "case {case}: raw {raw:?}");
        }
    }

    #[test]
    fn renderer_parser_round_trip() {
        let queries = ["What is A?", "Where is B located?", "Summarize C."];
        let rendered = queries
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {q}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n|||||";
        assert_eq!(parse_queries(&rendered, 20).unwrap(), queries);
    }
}
