//! Geometry diagnostics for the bundled tracks and the curvature context
//! the cost network sees.
use zipmpc::track::{TrackModel, TrackSegment};

fn main() -> zipmpc::Result<()> {
    for name in ["train", "test1", "test2"] {
        let track = TrackModel::bundled(name)?;
        println!("[{name}]\n{}\n", track.check());
    }

    let oval = TrackModel::new(
        vec![
            TrackSegment::straight(2.0),
            TrackSegment::arc(1.0, std::f64::consts::PI),
            TrackSegment::straight(2.0),
            TrackSegment::arc(1.0, std::f64::consts::PI),
        ],
        0.2,
    )?;
    println!("oval length {:.3}", oval.total_length());
    for s in [0.0, 1.0, 2.5, 4.0] {
        let ctx = oval.extract_context(s, 18, 0.03, 1.8);
        println!("s {s:.1}: kappa {:.2}, mean kappa ahead {:.3}, context {} samples", oval.curvature(s), oval.mean_curvature_ahead(s, 1.0), ctx.len());
    }
    let pose = oval.frenet_to_cartesian(2.5, 0.1, 0.0)?;
    println!("s 2.5, d 0.1 -> {pose:?}");
    Ok(())
}
