pub mod autodiff;
pub mod regloss;
pub mod scin;
pub mod treebank;
