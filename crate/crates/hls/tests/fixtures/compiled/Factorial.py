import sys
from typing import Callable, Any, TypeVar, NamedTuple
from math import floor
from itertools import count

import module_ as module_
import _dafny as _dafny
import System_ as System_

# Module: module_

class default__:
    def  __init__(self):
        pass

    @staticmethod
    def Factorial(n):
        if (n) == (0):
            return 1
        elif True:
            return (n) * (default__.Factorial((n) - (1)))

