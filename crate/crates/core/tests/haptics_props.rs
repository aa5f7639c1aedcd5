use nalgebra::Vector3;
use proptest::prelude::*;
use telesim_core::haptics::*;
use telesim_core::kinematics::{ArmModel, Pose};
use telesim_core::world::{Body, Contact, GraspBinding, Scene, World, WorldState};

fn base() -> WorldState {
    let w = World::new(ArmModel::panda(), Scene::standard());
    let mut s = w.initial_state(&w.arm.ready_state());
    s.contacts.clear();
    s
}

fn hold(s: &mut WorldState, mass: f64, offset: Vector3<f64>, since: f64) {
    let ee = s.end_effector.position;
    let cube = s.objects.iter_mut().find(|o| o.id == 2).unwrap();
    cube.mass = mass;
    cube.grasped = true;
    cube.pose.position = ee + offset;
    s.grasp_binding = Some(GraspBinding {
        cube: 2,
        offset: Pose::from_position(offset),
        since,
        delta_v: Vector3::zeros(),
    });
}

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn contact(cube: u32, normal: Vector3<f64>, onset_time: f64, onset_speed: f64, slide: f64) -> Contact {
    Contact {
        cube,
        other: Body::Floor,
        normal,
        depth: 0.0,
        relative_velocity: Vector3::zeros(),
        onset_time,
        onset_speed,
        slide_distance: slide,
    }
}

proptest! {
    #[test]
    fn clamp_holds_for_any_input(
        mass in 0.01f64..20.0,
        offset in vec3(0.2),
        v in vec3(50.0),
        a in vec3(1e4),
        omega in -1e3f64..1e3,
        dv in vec3(20.0),
        onset_speed in 0.0f64..30.0,
        slide in 0.0f64..1.0,
        age_ms in 0u32..40,
        grasped in any::<bool>(),
    ) {
        let mut s = base();
        s.time = 10.0;
        if grasped {
            hold(&mut s, mass, offset, 10.0 - 0.005);
            s.grasp_binding.as_mut().unwrap().delta_v = dv;
            s.contacts.push(contact(2, Vector3::z(), 10.0 - f64::from(age_ms) / 1000.0, onset_speed, slide));
        }
        let f = render_contact_forces(&s, &HapticParams::default(), &v, &a, omega);
        prop_assert!(f.magnitude() <= FORCE_LIMIT + 1e-12);
        let total = f.modes.total();
        prop_assert_eq!(f.clamped, total.norm() > FORCE_LIMIT);
        if !f.clamped {
            prop_assert_eq!(f.force, total);
        } else {
            // Same direction as the pre-clamp sum.
            prop_assert!((f.force.normalize() - total.normalize()).norm() < 1e-9);
        }
        if !grasped {
            prop_assert_eq!(f, ForceSample::zero(s.time));
        }
    }

    #[test]
    fn texture_vanishes_without_tangential_speed(
        mass in 0.05f64..2.0,
        normal_speed in -2.0f64..2.0,
        slide in 0.0f64..1.0,
    ) {
        let mut s = base();
        s.time = 3.0;
        hold(&mut s, mass, Vector3::zeros(), 1.0);
        s.contacts.push(contact(2, Vector3::z(), 0.5, 0.0, slide));
        // Velocity purely along the contact normal.
        let v = Vector3::new(0.0, 0.0, normal_speed);
        let f = render_contact_forces(&s, &HapticParams::default(), &v, &Vector3::zeros(), 0.0);
        prop_assert_eq!(f.modes.texture, Vector3::zeros());
    }

    #[test]
    fn impact_impulse_integrates_to_momentum(
        mass in 0.05f64..1.0,
        speed in 0.01f64..2.0,
        onset_ms in 1000u64..100_000,
    ) {
        let mut s = base();
        hold(&mut s, mass, Vector3::zeros(), 0.0);
        s.contacts.push(contact(2, Vector3::z(), onset_ms as f64 / 1000.0, speed, 0.0));
        let params = HapticParams::default();
        let mut impulse = Vector3::zeros();
        for k in 0..60 {
            s.time = (onset_ms + k) as f64 / 1000.0;
            let f = render_contact_forces(&s, &params, &Vector3::zeros(), &Vector3::zeros(), 0.0);
            impulse += f.modes.impact * 0.001;
        }
        let want = mass * speed;
        prop_assert!((impulse.norm() - want).abs() <= 0.01 * want, "{} vs {}", impulse.norm(), want);
    }

    #[test]
    fn rotation_is_damping_torque(omega in -10.0f64..10.0) {
        let mut s = base();
        hold(&mut s, 0.3, Vector3::zeros(), 0.0);
        s.time = 1.0;
        let f = render_contact_forces(&s, &HapticParams::default(), &Vector3::zeros(), &Vector3::zeros(), omega);
        prop_assert_eq!(f.torque_z, -0.05 * omega);
    }
}

#[test]
fn weight_and_clamp_examples() {
    let params = HapticParams::default();
    let mut s = base();
    hold(&mut s, 0.5, Vector3::zeros(), 0.0);
    s.time = 2.0;
    let f = render_contact_forces(&s, &params, &Vector3::zeros(), &Vector3::zeros(), 0.0);
    assert!((f.magnitude() - 4.905).abs() < 1e-12);
    assert!(!f.clamped);

    let mut s = base();
    hold(&mut s, 1.0, Vector3::zeros(), 0.0);
    s.time = 2.0;
    let f = render_contact_forces(&s, &params, &Vector3::zeros(), &Vector3::zeros(), 0.0);
    assert!((f.modes.weight.norm() - 9.81).abs() < 1e-12);
    assert!((f.magnitude() - 5.0).abs() < 1e-12);
    assert!(f.clamped);
}

#[test]
fn balance_pushes_toward_offset() {
    let mut s = base();
    hold(&mut s, 0.4, Vector3::new(0.01, 0.0, 0.0), 0.0);
    s.time = 2.0;
    let f = render_contact_forces(&s, &HapticParams::default(), &Vector3::zeros(), &Vector3::zeros(), 0.0);
    assert!((f.modes.balance.x - 10.0 * 0.4 * 9.81 * 0.01).abs() < 1e-12);
    assert_eq!(f.modes.balance.z, 0.0);
}
