use crate::error::{Error, Result};

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<()> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::Shape(format!(
            "triplet embeddings have dimensions {}, {}, {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::Config(format!(
            "margin must be positive, got {margin}"
        )));
    }
    Ok(())
}

/// `max(0, ‖a − p‖² − ‖a − n‖² + margin)`.
pub fn triplet_loss(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<f64> {
    check_dims(anchor, positive, negative, margin)?;
    let hinge = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin;
    Ok(hinge.max(0.0))
}

/// Loss and its gradients with respect to anchor, positive and negative.
/// At the kink the hinge is treated as inactive.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradient {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn triplet_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    margin: f64,
) -> Result<TripletGradient> {
    check_dims(anchor, positive, negative, margin)?;
    let hinge = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin;
    let dim = anchor.len();
    if hinge <= 0.0 {
        return Ok(TripletGradient {
            loss: 0.0,
            anchor: vec![0.0; dim],
            positive: vec![0.0; dim],
            negative: vec![0.0; dim],
        });
    }
    let mut g = TripletGradient {
        loss: hinge,
        anchor: Vec::with_capacity(dim),
        positive: Vec::with_capacity(dim),
        negative: Vec::with_capacity(dim),
    };
    for k in 0..dim {
        let (a, p, n) = (anchor[k], positive[k], negative[k]);
        g.anchor.push(2.0 * (n - p));
        g.positive.push(-2.0 * (a - p));
        g.negative.push(2.0 * (a - n));
    }
    Ok(g)
}
