//! Relative rotations and swing-twist decomposition about the vertical axis.
//!
//! Run with `cargo run --example quaternions`.

use xrid::quat::{quat_delta, swing_twist, Quaternion, Vec3};

fn main() -> xrid::Result<()> {
    let yaw = Quaternion::from_axis_angle(Vec3::Y, 0.9);
    let pitch = Quaternion::from_axis_angle(Vec3::X, -0.3);
    let head = yaw * pitch;

    let (twist, swing) = swing_twist(head, Vec3::Y);
    println!("head  {head:?}");
    println!("twist {twist:?} (yaw {:.3} rad)", 2.0 * twist.y.atan2(twist.w));
    println!("swing {swing:?}");

    let next = Quaternion::from_axis_angle(Vec3::Y, 0.05) * head;
    let delta = quat_delta(head, next);
    println!("frame-to-frame delta {delta:?}");
    println!("recomposed matches next: {:.1e}", (head * delta).dot(next).abs() - 1.0);
    Ok(())
}
