//! Visual prompt drawing, alpha compositing and the semantic condition.

mod condition;
mod draw;

pub use condition::{
    build_semantic_condition, composite, render_heatmap, SemanticCondition, VisualCondition,
};
pub use draw::{draw_prompt, ArrowPath, PromptColor, PromptLayer, PromptShape, VisualPromptStyle};
