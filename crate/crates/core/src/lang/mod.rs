//! Abstract syntax and text front-end for annotated temporal rules, facts and queries.

mod ast;
mod parser;

pub use ast::*;
pub use parser::{parse_fact, parse_program, parse_query, parse_rule, ParseError, ProgramErrors};
