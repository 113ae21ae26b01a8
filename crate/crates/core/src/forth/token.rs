use super::ForthError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Word,
    Number,
    ColonDefStart,
    MacroDefStart,
    ColonDefEnd,
    /// Body of a `{ ... }` slot, braces removed.
    Slot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    /// 1-based source line.
    pub line: usize,
}

impl Token {
    fn classify(text: String, line: usize) -> Token {
        let kind = match text.as_str() {
            ":" => TokenKind::ColonDefStart,
            ";" => TokenKind::ColonDefEnd,
            t if t.eq_ignore_ascii_case("MACRO:") => TokenKind::MacroDefStart,
            t if !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()) => TokenKind::Number,
            _ => TokenKind::Word,
        };
        Token { text, kind, line }
    }
}

/// Split source into tokens, dropping `( ... )` and `\ ...` comments and
/// capturing each `{ ... }` slot body as one token.
pub fn tokenize(source: &str) -> Result<Vec<Token>, ForthError> {
    let chars: Vec<char> = source.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while i < chars.len() {
        let ch = chars[i];
        if ch.is_whitespace() {
            if ch == '\n' {
                line += 1;
            }
            i += 1;
            continue;
        }
        if ch == '{' {
            let start_line = line;
            let mut j = i + 1;
            while j < chars.len() && chars[j] != '}' {
                if chars[j] == '\n' {
                    line += 1;
                }
                j += 1;
            }
            if j == chars.len() {
                return Err(ForthError::Parse { line: start_line, message: "unterminated slot brace".into() });
            }
            let body: String = chars[i + 1..j].iter().collect();
            out.push(Token {
                text: body.split_whitespace().collect::<Vec<_>>().join(" "),
                kind: TokenKind::Slot,
                line: start_line,
            });
            i = j + 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() && chars[i] != '{' {
            i += 1;
        }
        let word: String = chars[start..i].iter().collect();
        match word.as_str() {
            "\\" => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            "(" => {
                let start_line = line;
                while i < chars.len() && chars[i] != ')' {
                    if chars[i] == '\n' {
                        line += 1;
                    }
                    i += 1;
                }
                if i == chars.len() {
                    return Err(ForthError::Parse { line: start_line, message: "unterminated comment".into() });
                }
                i += 1;
            }
            _ => out.push(Token::classify(word, line)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(src: &str) -> Vec<String> {
        tokenize(src).unwrap().into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn strips_line_comment() {
        assert_eq!(texts("1- DUP \\ note"), ["1-", "DUP"]);
    }

    #[test]
    fn colon_definition_kinds() {
        let toks = tokenize(": SORT 1- ;").unwrap();
        let kinds: Vec<_> = toks.iter().map(|t| t.kind).collect();
        assert_eq!(kinds, [TokenKind::ColonDefStart, TokenKind::Word, TokenKind::Word, TokenKind::ColonDefEnd]);
    }

    #[test]
    fn paren_comment_with_braces_is_dropped() {
        let toks = tokenize(": A ( x {y} -- z )\n DUP ;").unwrap();
        assert_eq!(toks.len(), 4);
        assert_eq!(toks[2].line, 2);
    }

    #[test]
    fn slot_with_attached_brace() {
        let toks = tokenize("{ observe D0 D-1 -> permute D-1 D0 R0}\n1-").unwrap();
        assert_eq!(toks[0].kind, TokenKind::Slot);
        assert_eq!(toks[0].text, "observe D0 D-1 -> permute D-1 D0 R0");
        assert_eq!(toks[1].text, "1-");
        assert_eq!(toks[1].line, 2);
    }

    #[test]
    fn multiline_slot_keeps_start_line() {
        let toks = tokenize("\n{ observe D0\n -> choose 0 1 } DROP").unwrap();
        assert_eq!(toks[0].line, 2);
        assert_eq!(toks[1].line, 3);
    }

    #[test]
    fn unterminated_errors_carry_line() {
        assert_eq!(
            tokenize("DUP\n( open").unwrap_err(),
            ForthError::Parse { line: 2, message: "unterminated comment".into() }
        );
        assert!(matches!(tokenize("\n\n{ observe").unwrap_err(), ForthError::Parse { line: 3, .. }));
    }
}
