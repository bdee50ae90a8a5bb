//! Lexical helpers for Verilog text: comment/string masking, keyword
//! scanning, and a structural well-formedness check used when no external
//! syntax checker is available.

/// Result of masking comments and string literals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    /// Same byte length as the source; masked bytes become spaces, newlines kept.
    pub text: String,
    /// A block comment or string literal ran to end of input.
    pub unterminated: bool,
}

/// Blanks out `//` and `/* */` comments and `"..."` string literals while
/// preserving byte offsets and line structure.
pub fn mask_comments_and_strings(src: &str) -> Masked {
    let bytes = src.as_bytes();
    let mut out = bytes.to_vec();
    let mut unterminated = false;
    let mut i = 0;
    let blank = |out: &mut [u8], from: usize, to: usize| {
        for b in &mut out[from..to] {
            if *b != b'\n' {
                *b = b' ';
            }
        }
    };
    while i < bytes.len() {
        match bytes[i] {
            b'/' if bytes.get(i + 1) == Some(&b'/') => {
                let end = bytes[i..]
                    .iter()
                    .position(|&b| b == b'\n')
                    .map_or(bytes.len(), |p| i + p);
                blank(&mut out, i, end);
                i = end;
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                let end = match find(&bytes[i + 2..], b"*/") {
                    Some(p) => i + 2 + p + 2,
                    None => {
                        unterminated = true;
                        bytes.len()
                    }
                };
                blank(&mut out, i, end);
                i = end;
            }
            b'"' => {
                let mut j = i + 1;
                let mut closed = false;
                while j < bytes.len() {
                    match bytes[j] {
                        b'\\' => j += 2,
                        b'"' => {
                            closed = true;
                            j += 1;
                            break;
                        }
                        b'\n' => break,
                        _ => j += 1,
                    }
                }
                let end = j.min(bytes.len());
                if !closed {
                    unterminated = true;
                }
                blank(&mut out, i, end);
                i = end;
            }
            _ => i += 1,
        }
    }
    // every masked byte is ASCII and unmasked bytes keep their UTF-8 sequences whole
    let text = String::from_utf8(out)
        .unwrap_or_else(|e| String::from_utf8_lossy(e.as_bytes()).into_owned());
    Masked { text, unterminated }
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

pub fn is_ident_start(b: u8) -> bool {
    b.is_ascii_alphabetic() || b == b'_'
}

pub fn is_ident_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$'
}

/// `true` for a plain (non-escaped) Verilog identifier.
pub fn is_identifier(s: &str) -> bool {
    let b = s.as_bytes();
    !b.is_empty() && is_ident_start(b[0]) && b.iter().all(|&c| is_ident_char(c))
}

/// A word in masked text with its byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Word<'a> {
    pub start: usize,
    pub end: usize,
    pub text: &'a str,
}

/// Identifier-like words of masked text. Compiler directives (`` `define``)
/// and escaped identifiers (`\name `) are skipped so they never read as keywords.
pub fn words(masked: &str) -> impl Iterator<Item = Word<'_>> {
    let bytes = masked.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() {
            let b = bytes[i];
            if b == b'\\' {
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
            } else if b == b'`' || b == b'$' || b == b'\'' {
                i += 1;
                while i < bytes.len() && is_ident_char(bytes[i]) {
                    i += 1;
                }
            } else if is_ident_start(b) {
                let start = i;
                while i < bytes.len() && is_ident_char(bytes[i]) {
                    i += 1;
                }
                return Some(Word {
                    start,
                    end: i,
                    text: &masked[start..i],
                });
            } else if b.is_ascii_digit() {
                // numbers such as 8'hFF or 1e3 must not yield words
                while i < bytes.len() && (is_ident_char(bytes[i]) || bytes[i] == b'\'') {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        None
    })
}

const BLOCK_PAIRS: &[(&str, &str)] = &[
    ("module", "endmodule"),
    ("macromodule", "endmodule"),
    ("function", "endfunction"),
    ("task", "endtask"),
    ("begin", "end"),
    ("case", "endcase"),
    ("casex", "endcase"),
    ("casez", "endcase"),
    ("generate", "endgenerate"),
    ("fork", "join"),
];

/// Built-in structural check: balanced block keywords and brackets, at least
/// one named module, and nothing but whitespace after the last `endmodule`.
/// Returns a reason on failure.
pub fn check_structure(src: &str) -> Result<(), String> {
    let masked = mask_comments_and_strings(src);
    if masked.unterminated {
        return Err("unterminated comment or string".into());
    }
    let text = &masked.text;
    let mut stack: Vec<(&str, usize)> = Vec::new();
    let mut modules = 0;
    let mut last_endmodule = None;
    let ws: Vec<Word> = words(text).collect();
    for (k, w) in ws.iter().enumerate() {
        if let Some(&(_, close)) = BLOCK_PAIRS.iter().find(|(open, _)| *open == w.text) {
            // `wait fork` / `disable fork` are statements, not blocks
            let prev = k.checked_sub(1).map(|p| ws[p].text);
            if w.text == "fork" && matches!(prev, Some("wait") | Some("disable")) {
                continue;
            }
            if w.text == "module" || w.text == "macromodule" {
                match ws.get(k + 1) {
                    Some(name)
                        if is_identifier(name.text)
                            && text[w.end..name.start].trim().is_empty() =>
                    {
                        modules += 1
                    }
                    _ => return Err(format!("module at byte {} has no name", w.start)),
                }
            }
            stack.push((close, w.start));
        } else if BLOCK_PAIRS.iter().any(|(_, close)| *close == w.text)
            || w.text == "join_any"
            || w.text == "join_none"
        {
            let want = if w.text.starts_with("join") {
                "join"
            } else {
                w.text
            };
            match stack.pop() {
                Some((close, _)) if close == want => {}
                Some((close, at)) => {
                    return Err(format!(
                        "`{}` at byte {} closes block expecting `{close}` opened at byte {at}",
                        w.text, w.start
                    ))
                }
                None => return Err(format!("unmatched `{}` at byte {}", w.text, w.start)),
            }
            if w.text == "endmodule" {
                last_endmodule = Some(w.end);
            }
        }
    }
    if let Some((close, at)) = stack.pop() {
        return Err(format!("block opened at byte {at} is missing `{close}`"));
    }
    if modules == 0 {
        return Err("no module found".into());
    }
    if let Some(end) = last_endmodule {
        if !text[end..].trim().is_empty() {
            return Err("trailing text after the last endmodule".into());
        }
    }
    let mut depth: Vec<u8> = Vec::new();
    for (i, b) in text.bytes().enumerate() {
        match b {
            b'(' | b'[' | b'{' => depth.push(b),
            b')' | b']' | b'}' => {
                let open = match b {
                    b')' => b'(',
                    b']' => b'[',
                    _ => b'{',
                };
                if depth.pop() != Some(open) {
                    return Err(format!("unbalanced `{}` at byte {i}", b as char));
                }
            }
            _ => {}
        }
    }
    if !depth.is_empty() {
        return Err("unclosed bracket".into());
    }
    Ok(())
}

/// `true` when `pattern` occurs in `src` outside comments and strings.
pub fn contains_outside_comments(src: &str, pattern: &str) -> bool {
    !pattern.is_empty() && mask_comments_and_strings(src).text.contains(pattern)
}

/// Names of the ports declared in a module header or its leading
/// input/output/inout declarations, in order of first appearance.
pub fn port_names(definition: &str) -> Vec<String> {
    const TYPES: &[&str] = &[
        "wire", "reg", "logic", "signed", "unsigned", "integer", "var", "tri", "bit",
    ];
    let masked = mask_comments_and_strings(definition).text;
    let mut names: Vec<String> = Vec::new();
    let mut in_decl = false;
    for w in words(&masked) {
        if matches!(w.text, "input" | "output" | "inout") {
            in_decl = true;
            continue;
        }
        if !in_decl || TYPES.contains(&w.text) {
            continue;
        }
        let before = &masked[..w.start];
        if before.matches('[').count() > before.matches(']').count() {
            continue;
        }
        if !names.iter().any(|n| n == w.text) {
            names.push(w.text.to_string());
        }
        if masked[w.end..].trim_start().starts_with(';') {
            in_decl = false;
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masking_preserves_offsets() {
        let src = "module m; // endmodule\n/* module\n x */ assign s = \"endmodule\"; endmodule";
        let m = mask_comments_and_strings(src);
        assert_eq!(m.text.len(), src.len());
        assert_eq!(m.text.matches('\n').count(), src.matches('\n').count());
        let kw: Vec<&str> = words(&m.text)
            .map(|w| w.text)
            .filter(|w| w.contains("module"))
            .collect();
        assert_eq!(kw, ["module", "endmodule"]);
        assert!(!m.unterminated);
        assert!(mask_comments_and_strings("a /* b").unterminated);
        assert!(mask_comments_and_strings("a = \"open").unterminated);
    }

    #[test]
    fn masking_keeps_utf8_valid() {
        let m = mask_comments_and_strings("// h\u{e9}llo \u{1F600}\nmodule m; endmodule");
        assert!(m.text.ends_with("module m; endmodule"));
    }

    #[test]
    fn words_skip_directives_numbers_and_escapes() {
        let src = "`timescale 1ns/1ps\n8'hff \\module x $display endmodule_x";
        let ws: Vec<&str> = words(src).map(|w| w.text).collect();
        assert_eq!(ws, ["x", "endmodule_x"]);
    }

    #[test]
    fn identifiers() {
        assert!(is_identifier("d_latch"));
        assert!(is_identifier("_x$1"));
        assert!(!is_identifier("1abc"));
        assert!(!is_identifier(""));
        assert!(!is_identifier("a-b"));
    }

    #[test]
    fn structure_check() {
        let ok = "module d_latch(input d, input en, output reg q);\n always @(*) begin if (en) q = d; end\nendmodule\n";
        assert_eq!(check_structure(ok), Ok(()));
        assert!(check_structure("module m(input a);").is_err());
        assert!(check_structure("module m; begin endmodule").is_err());
        assert!(check_structure("module m; assign x = (a; endmodule").is_err());
        assert!(check_structure("module (a); endmodule").is_err());
        assert!(check_structure("module m; endmodule garbage").is_err());
        assert!(check_structure("module m; /* endmodule").is_err());
        assert!(check_structure("wire x;").is_err());
        assert!(check_structure("module m; initial fork a; join_none endmodule").is_ok());
    }

    #[test]
    fn keyword_outside_comments() {
        assert!(contains_outside_comments(
            "always @(posedge clk)",
            "posedge"
        ));
        assert!(!contains_outside_comments(
            "// posedge\nassign a = b;",
            "posedge"
        ));
        assert!(!contains_outside_comments("x", ""));
    }

    #[test]
    fn ports_from_headers() {
        assert_eq!(
            port_names(
                "module m #(parameter W = 8) (input [W-1:0] a, input b, output reg [3:0] y);"
            ),
            ["a", "b", "y"]
        );
        assert_eq!(
            port_names("module m(a, b, y);\n input a, b;\n output y;\n"),
            ["a", "b", "y"]
        );
    }
}
