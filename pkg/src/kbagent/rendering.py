"""Canonical text renderings.

Every score in the pipeline is computed over rendered text, so the templates
here are the single source of truth. Changing one changes retrieval scores,
dataset contents, and trained models; keep them stable.
"""

from __future__ import annotations

from .kb import SubGoalUnit, Triple


def render_triple(t: Triple) -> str:
    """``subject | relation | value`` with an optional ``[unit]`` suffix."""
    value = t.value.text
    if t.value.unit:
        value = f"{value} [{t.value.unit}]"
    return f"{t.subject} | {t.relation.name} | {value}"


def render_unit(u: SubGoalUnit) -> str:
    """Name, associated entities, reflections, then the trajectory."""
    lines = [u.name]
    lines.append("entities: " + ", ".join(u.associated_entities))
    lines.extend(u.reflections)
    lines.extend(u.action_trajectory)
    return "\n".join(lines)


def render_action_trajectory(actions: list[str]) -> str:
    return "\n".join(actions)


def render_plan_position(subgoal_name: str, plan_steps: list[str]) -> str:
    """The planner's view: current sub-goal plus the remaining plan."""
    return f"subgoal: {subgoal_name}\nplan: " + " ; ".join(plan_steps)


def render_env_query(goal: str, subgoal_name: str, plan_steps: list[str]) -> str:
    """Environmental-retrieval query; the same form the agent issues live."""
    return render_query_bundle(goal, render_plan_position(subgoal_name, plan_steps), [])


def render_exp_query(goal: str, actions: list[str], env_triples: list[Triple]) -> str:
    """Experiential-retrieval query: goal, trajectory, then integrated env
    knowledge; matches the live query form (task + plan text + env docs)."""
    return render_query_bundle(
        goal, render_action_trajectory(actions), [render_triple(t) for t in env_triples]
    )


def render_query_bundle(task_description: str, plan_text: str, env_doc_texts: list[str]) -> str:
    parts = [task_description, plan_text]
    parts.extend(env_doc_texts)
    return "\n".join(p for p in parts if p)
