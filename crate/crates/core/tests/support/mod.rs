pub mod checks;
pub mod gradients;
pub mod oracle;
