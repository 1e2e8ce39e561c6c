//! Syntax-tree rendering of submitted code.

use tree_sitter::{Node, Parser};

use crate::data::Language;

use super::FeedbackError;

/// Returned in place of a tree when the code does not parse.
pub const AST_UNAVAILABLE: &str = "AST_UNAVAILABLE(parse_error)";

/// Parenthesized tree of named nodes, e.g.
/// `(program (local_variable_declaration (integral_type "int") ...))`.
///
/// Named leaves carry their source text as a JSON string literal.
pub fn extract_ast(code: &str, language: Language) -> Result<String, FeedbackError> {
    let grammar: tree_sitter::Language = match language {
        Language::Java => tree_sitter_java::LANGUAGE.into(),
        Language::Python => tree_sitter_python::LANGUAGE.into(),
        Language::Other => return Err(FeedbackError::UnsupportedLanguage(language)),
    };
    if code.trim().is_empty() {
        return Ok(AST_UNAVAILABLE.to_string());
    }
    let mut parser = Parser::new();
    parser.set_language(&grammar).map_err(|e| FeedbackError::Grammar(e.to_string()))?;
    let Some(tree) = parser.parse(code, None) else {
        return Ok(AST_UNAVAILABLE.to_string());
    };
    let root = tree.root_node();
    if root.has_error() {
        return Ok(AST_UNAVAILABLE.to_string());
    }
    let mut out = String::new();
    write_node(root, code.as_bytes(), &mut out);
    Ok(out)
}

fn write_node(node: Node<'_>, src: &[u8], out: &mut String) {
    out.push('(');
    out.push_str(node.kind());
    let mut cursor = node.walk();
    let children: Vec<Node<'_>> = node.named_children(&mut cursor).collect();
    if children.is_empty() {
        let text = node.utf8_text(src).unwrap_or_default();
        out.push(' ');
        out.push_str(&serde_json::to_string(text).expect("string serializes"));
    }
    for child in children {
        out.push(' ');
        write_node(child, src, out);
    }
    out.push(')');
}
