use incdet::detector::DetectorConfig;

fn conv_params(cin: usize, cout: usize) -> usize {
    9 * cin * cout + cout
}

fn linear_params(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

/// Stem once, one extractor per branch, then the shared RPN and box head.
pub fn closed_form_params(cfg: &DetectorConfig, branches: usize, classes: usize) -> usize {
    let mut c = cfg.in_channels;
    let mut stem = 0;
    for s in &cfg.stem {
        stem += conv_params(c, s.channels);
        c = s.channels;
    }
    let mut ext = 0;
    for s in &cfg.extractor {
        ext += conv_params(c, s.channels);
        c = s.channels;
    }
    let a = cfg.anchor_sizes.len() * cfg.anchor_ratios.len();
    let rpn = linear_params(c, a) + linear_params(c, 4 * a);
    let pooled = cfg.pool_size * cfg.pool_size * c;
    let head = linear_params(pooled, cfg.head_hidden)
        + linear_params(cfg.head_hidden, classes + 1)
        + linear_params(cfg.head_hidden, 4 * classes);
    stem + branches * ext + rpn + head
}
