use drop_core::environments::*;
fn main() {
    let mut env = twin_peaks_env();
    for (name, p) in [("oracle", oracle_controller()), ("door", door_seeker()), ("goal(jam)", goal_seeker()), ("random", random_controller(2))] {
        let r = scripted_mean_return(&mut env, &p, 10, 1).unwrap();
        println!("{name:10} {r:8.2}");
    }
    let mut env2 = TwinPeaks::with_start_box(DOOR_EXIT_START);
    let r = scripted_mean_return(&mut env2, &goal_seeker(), 10, 2).unwrap();
    println!("{:10} {r:8.2}", "goal(exit)");
}
