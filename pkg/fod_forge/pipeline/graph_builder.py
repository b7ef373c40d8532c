from langgraph.graph import END, StateGraph

from .graph_nodes import make_stage_node, report_node, should_continue_or_finish
from .graph_state import PipelineState
from .stages import STAGES


def create_pipeline_workflow():
    """Returns the compiled stage graph: phantom -> scan -> ... -> eval -> report"""

    workflow = StateGraph(PipelineState)

    for stage in STAGES:
        workflow.add_node(stage, make_stage_node(stage))
    workflow.add_node("report", report_node)

    workflow.set_entry_point(STAGES[0])

    # Every stage either hands over to the next one or ends the run on failure
    following = list(STAGES[1:]) + ["report"]
    for stage, next_node in zip(STAGES, following):
        workflow.add_conditional_edges(
            stage,
            should_continue_or_finish,
            {"continue": next_node, "end": END},
        )
    workflow.add_edge("report", END)

    return workflow.compile()


class PipelineWorkflow:
    """
    Wrapper class for the compiled stage graph
    """

    def __init__(self):
        self.app = create_pipeline_workflow()

    def run_workflow(self, initial_state: PipelineState) -> PipelineState:
        """
        Run the stage graph with the given initial state

        Args:
            initial_state: Initial state for the workflow (must match PipelineState schema)

        Returns:
            Final state after workflow execution
        """
        return self.app.invoke(initial_state)


_workflow = None


def get_workflow() -> PipelineWorkflow:
    """
    Get the shared workflow instance, compiling it on first use
    """
    global _workflow
    if _workflow is None:
        _workflow = PipelineWorkflow()
    return _workflow
