mod support;

/// With every bound zero the robust rows collapse to the nominal ones, so the
/// event-mode solve must return the time-mode controls. Scenes where both
/// solves are infeasible are redrawn.
#[test]
fn zero_box_event_controls_equal_time_controls() {
    let mut rng = support::rng(31);
    let mut compared = 0;
    for draw in 0..300 {
        if let Some(gap) = support::point_box_control_gap(&mut rng) {
            assert!(gap <= 1e-8, "draw {draw}: controls differ by {gap}");
            compared += 1;
            if compared == 100 {
                return;
            }
        }
    }
    panic!("only {compared} feasible scenes");
}
